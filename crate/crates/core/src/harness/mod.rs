//! Reproducible experiments: one runner per CLI subcommand.
//!
//! Runners return their artifacts in memory; [`write_artifacts`] puts them in
//! the output directory next to the effective config. CSV artifacts start with
//! a `# config_sha256=...` comment line and JSON artifacts carry the same hash.

pub mod checks;
mod config;

pub use config::ExperimentConfig;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use crate::diagnostics::{probe_error, quality_sweep, sampling_variance, straightness_report};
use crate::error::Result;
use crate::process::{Generator, SamplingDomain, TokenProcess, TokenSequence};
use checks::{checks_to_csv, run_oracle_checks, CheckOptions};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "DISA_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "disa-out";

pub const TOKENS_CSV_HEADER: &str = "seq_id,ar_step,position,dim,value";

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
    /// Set by `oracle-check` when any check fails.
    pub failed: bool,
}

impl RunOutput {
    pub fn artifact(&self, name: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.name == name).map(|a| a.contents.as_str())
    }
}

fn csv(config: &ExperimentConfig, body: String) -> String {
    format!("# config_sha256={}\n{body}", config.hash())
}

fn json_text(value: serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(&value).expect("json serializes");
    s.push('\n');
    s
}

fn artifact(name: &str, contents: String) -> Artifact {
    Artifact { name: name.to_string(), contents }
}

/// `output_dir` from the config, else the environment variable, else [`DEFAULT_OUTPUT_DIR`].
pub fn resolve_output_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Writes `config.json` and every artifact into `dir`.
pub fn write_artifacts(config: &ExperimentConfig, dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), config.to_json() + "\n")?;
    for a in &out.artifacts {
        std::fs::write(dir.join(&a.name), &a.contents)?;
    }
    Ok(())
}

struct Setup {
    process: TokenProcess,
    domain: SamplingDomain,
}

impl Setup {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { process: config.process()?, domain: config.sampling_domain()? })
    }

    fn generator<'a>(&'a self, config: &ExperimentConfig) -> Generator<'a> {
        Generator {
            process: &self.process,
            policy: config.order,
            sampler: config.sampler_config(),
            domain: &self.domain,
            seed: config.seed,
            order_seed: config.effective_order_seed(),
        }
    }
}

/// Generates `sequences` sequences: `tokens.csv` plus per-step T(k) and NFE in `simulate.json`.
pub fn run_simulate(config: &ExperimentConfig) -> Result<RunOutput> {
    let setup = Setup::new(config)?;
    let gen = setup.generator(config);
    let sched = config.step_scheduler()?;
    let seqs: Vec<TokenSequence> = (0..config.sequences as u64)
        .into_par_iter()
        .map(|i| gen.generate(&sched, i, config.record_paths))
        .collect::<Result<_>>()?;

    let mut tokens = Vec::new();
    tokens.extend_from_slice(TOKENS_CSV_HEADER.as_bytes());
    tokens.push(b'\n');
    for (i, s) in seqs.iter().enumerate() {
        s.write_csv_rows(i, &mut tokens)?;
    }
    let tokens = String::from_utf8(tokens).expect("csv is utf-8");

    let total_nfe: usize = seqs.iter().map(|s| s.total_nfe()).sum();
    let steps: Vec<usize> = sched.schedule_table().into_iter().map(|(_, t)| t).collect();
    let calls = gen.sampler.calls_per_step();
    let nfe_per_step: Vec<usize> = steps.iter().map(|t| t * calls).collect();
    let report = json!({
        "config_sha256": config.hash(),
        "scheduler": sched.label(),
        "sampler": gen.sampler.label(),
        "sequences": seqs.len(),
        "steps_per_ar_step": steps,
        "nfe_per_ar_step": nfe_per_step,
        "nfe_per_sequence": sched.total_nfe(calls, 0),
        "total_nfe": total_nfe,
        "detail": seqs.iter().enumerate().map(|(i, s)| s.to_json(i, config.record_paths)).collect::<Vec<_>>(),
    });
    Ok(RunOutput {
        artifacts: vec![artifact("tokens.csv", csv(config, tokens)), artifact("simulate.json", json_text(report))],
        summary: vec![
            format!("scheduler {} with sampler {}", sched.label(), gen.sampler.label()),
            format!("sequences {}", seqs.len()),
            format!("total NFE {total_nfe} ({} per sequence)", sched.total_nfe(calls, 0)),
        ],
        failed: false,
    })
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Straightness, sampling variance and probe error under the configured scheduler.
pub fn run_diagnose(config: &ExperimentConfig) -> Result<RunOutput> {
    let setup = Setup::new(config)?;
    let gen = setup.generator(config);
    let sched = config.step_scheduler()?;
    let straight = straightness_report(&gen, &sched, config.straightness_trajectories, config.t_draws)?;
    let variance = sampling_variance(&gen, &sched, config.draws_per_step, config.variance_references)?;
    let probe = probe_error(&gen, config.ar_steps, config.probe_seeds)?;

    let report = json!({
        "config_sha256": config.hash(),
        "scheduler": sched.label(),
        "sampler": gen.sampler.label(),
        "straightness_trend": straight.trend,
        "variance_trend": variance.trend(),
        "probe_exact_strictly_decreasing": strictly_decreasing(&probe.exact),
        "probe_mse_final_below_first": probe.mse.last() < probe.mse.first(),
        "straightness": straight,
        "variance": variance,
        "variance_mean_per_step": variance.mean_per_step(),
        "probe": probe,
    });
    Ok(RunOutput {
        artifacts: vec![
            artifact("straightness.csv", csv(config, straight.to_csv())),
            artifact("variance.csv", csv(config, variance.to_csv())),
            artifact("probe.csv", csv(config, probe.to_csv())),
            artifact("diagnose.json", json_text(report)),
        ],
        summary: vec![
            format!("straightness trend (Spearman rho) {:.4}", straight.trend),
            format!("variance trend (Spearman rho) {:.4}", variance.trend()),
            format!(
                "probe MSE first {:.6} final {:.6}",
                probe.mse.first().copied().unwrap_or(f64::NAN),
                probe.mse.last().copied().unwrap_or(f64::NAN)
            ),
        ],
        failed: false,
    })
}

/// Quality sweep over the configured scheduler grid.
pub fn run_sweep(config: &ExperimentConfig) -> Result<RunOutput> {
    let setup = Setup::new(config)?;
    let gen = setup.generator(config);
    let schedulers = config.sweep_schedulers()?;
    let report = quality_sweep(&gen, &schedulers, config.sequences)?;
    let summary = report
        .summaries
        .iter()
        .map(|s| format!("{:<16} NFE {:>6}  aggregate W2 {:.5} (floor {:.5})", s.scheduler, s.nfe, s.aggregate_w2, s.aggregate_floor))
        .collect();
    let json = json!({
        "config_sha256": config.hash(),
        "sampler": gen.sampler.label(),
        "report": report,
    });
    Ok(RunOutput {
        artifacts: vec![
            artifact("sweep.csv", csv(config, report.to_csv())),
            artifact("sweep_summary.csv", csv(config, report.summary_csv())),
            artifact("sweep.json", json_text(json)),
        ],
        summary,
        failed: false,
    })
}

/// The oracle validation suite; `failed` is set when any check fails.
pub fn run_oracle_check(config: &ExperimentConfig, corrupt_score: bool) -> Result<RunOutput> {
    config.validate()?;
    let process = config.process()?;
    let schedule = config.diffusion_schedule()?;
    let opts = CheckOptions { seed: config.seed, corrupt_score, ..Default::default() };
    let results = run_oracle_checks(&process, &schedule, config.start_index(), opts)?;
    let failed = results.iter().any(|c| !c.passed);
    let summary = results
        .iter()
        .map(|c| {
            format!(
                "{} {} value={:.3e} tolerance={:.1e} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance,
                c.detail
            )
        })
        .collect();
    let json = json!({ "config_sha256": config.hash(), "corrupt_score": corrupt_score, "checks": results });
    Ok(RunOutput {
        artifacts: vec![
            artifact("oracle_check.csv", csv(config, checks_to_csv(&results))),
            artifact("oracle_check.json", json_text(json)),
        ],
        summary,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            grid_height: 2,
            grid_width: 2,
            token_dim: 2,
            ar_steps: 4,
            t_early: 6,
            t_late: 2,
            sequences: 8,
            draws_per_step: 4,
            variance_references: 2,
            probe_seeds: 4,
            straightness_trajectories: 3,
            t_draws: 4,
            sweep_t_early: vec![6],
            sweep_t_late: vec![2, 6],
            sweep_reference: false,
            ..Default::default()
        }
    }

    #[test]
    fn simulate_artifacts() {
        let c = tiny();
        let out = run_simulate(&c).unwrap();
        let tokens = out.artifact("tokens.csv").unwrap();
        let mut lines = tokens.lines();
        assert_eq!(lines.next().unwrap(), format!("# config_sha256={}", c.hash()));
        assert_eq!(lines.next().unwrap(), TOKENS_CSV_HEADER);
        assert_eq!(lines.count(), 8 * 4 * 2);
        assert_eq!(run_simulate(&c).unwrap(), out);
    }

    #[test]
    fn diagnose_and_sweep_shapes() {
        let c = tiny();
        let d = run_diagnose(&c).unwrap();
        assert_eq!(d.artifact("variance.csv").unwrap().lines().count(), 2 + 4 * 2);
        let s = run_sweep(&c).unwrap();
        assert_eq!(s.artifact("sweep.csv").unwrap().lines().count(), 2 + 2 * 4);
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let c = ExperimentConfig { ar_steps: 5, ..tiny() };
        assert!(run_simulate(&c).is_err());
    }
}
