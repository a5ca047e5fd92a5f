use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use disa_core::harness::{self, ExperimentConfig, RunOutput};
use disa_core::{SchedulerKind, StepScheduler};

/// Diffusion-step annealing experiments on an exact-oracle token process.
#[derive(Parser)]
#[command(name = "disa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-AR-step diffusion step counts as `k,T` CSV.
    Schedule(ScheduleArgs),
    /// Generate token sequences.
    Simulate(RunArgs),
    /// Straightness, sampling variance and probe error.
    Diagnose(RunArgs),
    /// Per-step W2 against the exact conditionals over a scheduler grid.
    Sweep(RunArgs),
    /// Validate the oracle and the sampler equivalences.
    OracleCheck {
        #[command(flatten)]
        run: RunArgs,
        /// Perturb the score before the finite-difference check.
        #[arg(long)]
        corrupt_score: bool,
    },
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "linear")]
    kind: SchedulerKind,
    #[arg(long)]
    t_early: usize,
    /// Defaults to `t_early`.
    #[arg(long)]
    t_late: Option<usize>,
    #[arg(long)]
    ar_steps: usize,
    #[arg(long, default_value_t = 1)]
    min_steps: usize,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    t_early: Option<usize>,
    #[arg(long)]
    t_late: Option<usize>,
    #[arg(long)]
    ar_steps: Option<usize>,
    /// Any config key, e.g. `--set eta=1.0`; applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> disa_core::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let named = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("sequences", self.sequences.map(|v| v.to_string())),
            ("sampler", self.sampler.clone()),
            ("scheduler", self.scheduler.clone()),
            ("t_early", self.t_early.map(|v| v.to_string())),
            ("t_late", self.t_late.map(|v| v.to_string())),
            ("ar_steps", self.ar_steps.map(|v| v.to_string())),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                c.set(&format!("{key}={v}"))?;
            }
        }
        for s in &self.set {
            c.set(s)?;
        }
        if let Some(dir) = &self.output_dir {
            c.output_dir = Some(dir.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn schedule(args: &ScheduleArgs) -> ExitCode {
    let sched = StepScheduler::new(args.kind, args.t_early, args.t_late.unwrap_or(args.t_early), args.ar_steps)
        .and_then(|s| s.with_min_steps(args.min_steps));
    match sched {
        Ok(s) => {
            println!("k,T");
            for (k, t) in s.schedule_table() {
                println!("{k},{t}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => usage_error(e),
    }
}

fn run(args: &RunArgs, runner: impl FnOnce(&ExperimentConfig) -> disa_core::Result<RunOutput>) -> ExitCode {
    let config = match args.config() {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    let started = Instant::now();
    let out = match runner(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let dir = harness::resolve_output_dir(&config);
    if let Err(e) = harness::write_artifacts(&config, &dir, &out) {
        eprintln!("error: writing {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    for line in &out.summary {
        println!("{line}");
    }
    println!("config sha256 {}", config.hash());
    println!("wrote {} artifacts to {}", out.artifacts.len() + 1, dir.display());
    println!("wall time {:.3} s", started.elapsed().as_secs_f64());
    if out.failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Schedule(a) => schedule(a),
        Command::Simulate(a) => run(a, harness::run_simulate),
        Command::Diagnose(a) => run(a, harness::run_diagnose),
        Command::Sweep(a) => run(a, harness::run_sweep),
        Command::OracleCheck { run: a, corrupt_score } => run(a, |c| harness::run_oracle_check(c, *corrupt_score)),
    }
}
