//! Reverse-process samplers driven by a [`Denoiser`] over a resolved [`NoisePath`].
//!
//! Diffusion samplers (DDPM, DDIM, DPM-Solver, DPM-Solver++) expect a
//! variance-preserving path; flow samplers (Euler, Euler-Maruyama) expect the
//! linear interpolation path. Every path ends at the clean level.

mod denoiser;
mod diffusion;
mod flow;

pub use denoiser::{Denoiser, ExactOracle, Parameterization, Prediction};
pub use diffusion::{ddim_sample, ddpm_sample, dpm_solver_pp_sample, dpm_solver_sample};
pub use flow::{euler_flow_sample, euler_maruyama_sample};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::standard_normal;
use crate::schedule::{Domain, NoiseLevel, NoisePath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    DpmSolver,
    DpmSolverPp,
    EulerFlow,
    EulerMaruyama,
}

impl SamplerKind {
    pub fn domain(&self) -> Domain {
        match self {
            SamplerKind::EulerFlow | SamplerKind::EulerMaruyama => Domain::ContinuousFlow,
            _ => Domain::DiscreteDiffusion,
        }
    }

    /// Parameterization the exact oracle is queried in for this sampler.
    pub fn native_parameterization(&self) -> Parameterization {
        match self.domain() {
            Domain::DiscreteDiffusion => Parameterization::Epsilon,
            Domain::ContinuousFlow => Parameterization::Velocity,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolver => "dpm_solver",
            SamplerKind::DpmSolverPp => "dpm_solver_pp",
            SamplerKind::EulerFlow => "euler_flow",
            SamplerKind::EulerMaruyama => "euler_maruyama",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            "dpm_solver" => Ok(SamplerKind::DpmSolver),
            "dpm_solver_pp" => Ok(SamplerKind::DpmSolverPp),
            "euler_flow" | "euler" => Ok(SamplerKind::EulerFlow),
            "euler_maruyama" => Ok(SamplerKind::EulerMaruyama),
            other => Err(Error::param("sampler", format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM stochasticity; 0 is the deterministic ODE map.
    #[serde(default)]
    pub eta: f64,
    /// DPM-Solver order, 1 or 2.
    #[serde(default = "default_order")]
    pub order: u8,
    #[serde(default = "default_sde_scale")]
    pub sde_noise_scale: f64,
    /// Symmetric bound on the x0 prediction.
    #[serde(default)]
    pub clamp: Option<f64>,
}

fn default_order() -> u8 {
    1
}

pub const DEFAULT_SDE_NOISE_SCALE: f64 = 1.0;

fn default_sde_scale() -> f64 {
    DEFAULT_SDE_NOISE_SCALE
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        Self { kind, eta: 0.0, order: 1, sde_noise_scale: DEFAULT_SDE_NOISE_SCALE, clamp: None }
    }

    pub fn ddim(eta: f64) -> Self {
        Self { eta, ..Self::new(SamplerKind::Ddim) }
    }

    pub fn dpm_solver(order: u8) -> Self {
        Self { order, ..Self::new(SamplerKind::DpmSolver) }
    }

    pub fn euler_maruyama(scale: f64) -> Self {
        Self { sde_noise_scale: scale, ..Self::new(SamplerKind::EulerMaruyama) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::param("eta", format!("{} must be >= 0", self.eta)));
        }
        if self.kind == SamplerKind::DpmSolver && !(1..=2).contains(&self.order) {
            return Err(Error::param("order", format!("{} must be 1 or 2", self.order)));
        }
        if !(self.sde_noise_scale >= 0.0 && self.sde_noise_scale.is_finite()) {
            return Err(Error::param("sde_noise_scale", "must be >= 0"));
        }
        if let Some(c) = self.clamp {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::param("clamp", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn calls_per_step(&self) -> usize {
        if self.kind == SamplerKind::DpmSolver && self.order == 2 {
            2
        } else {
            1
        }
    }

    pub fn domain(&self) -> Domain {
        self.kind.domain()
    }

    pub fn label(&self) -> String {
        match self.kind {
            SamplerKind::Ddim => format!("ddim_eta{}", self.eta),
            SamplerKind::DpmSolver => format!("dpm_solver_{}", self.order),
            SamplerKind::EulerMaruyama => format!("euler_maruyama_{}", self.sde_noise_scale),
            k => k.name().to_string(),
        }
    }
}

/// Per-call switches shared by every sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub clamp: Option<f64>,
    pub record_path: bool,
}

/// Full state history of one denoising run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathRecord {
    /// `x` at every visited time, initial noise first.
    pub states: Vec<DMatrix<f64>>,
    /// Native denoiser output at the start of every step.
    pub outputs: Vec<DMatrix<f64>>,
    pub x0_predictions: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub domain: Domain,
    pub times: Vec<f64>,
    pub levels: Vec<NoiseLevel>,
    pub nfe: usize,
    pub calls_per_step: usize,
    pub path: Option<PathRecord>,
}

impl TrajectoryRecord {
    pub fn step_count(&self) -> usize {
        self.times.len() - 1
    }

    pub fn to_json(&self, include_path: bool) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        let mut v = serde_json::json!({
            "domain": self.domain,
            "times": self.times,
            "nfe": self.nfe,
            "calls_per_step": self.calls_per_step,
        });
        if include_path {
            if let Some(p) = &self.path {
                v["path"] = serde_json::json!({
                    "states": p.states.iter().map(mat).collect::<Vec<_>>(),
                    "outputs": p.outputs.iter().map(mat).collect::<Vec<_>>(),
                    "x0_predictions": p.x0_predictions.iter().map(mat).collect::<Vec<_>>(),
                });
            }
        }
        v
    }
}

/// Denoiser wrapper that counts calls and optionally records the path.
pub(crate) struct Evaluator<'a> {
    denoiser: &'a dyn Denoiser,
    clamp: Option<f64>,
    pub nfe: usize,
    path: Option<PathRecord>,
}

/// `x0` and `eps` estimates at one state, after optional clamping.
pub(crate) struct Estimate {
    pub x0: DMatrix<f64>,
    pub eps: DMatrix<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(denoiser: &'a dyn Denoiser, opts: RunOptions, x_init: &DMatrix<f64>) -> Self {
        let path = opts.record_path.then(|| PathRecord { states: vec![x_init.clone()], ..Default::default() });
        Self { denoiser, clamp: opts.clamp, nfe: 0, path }
    }

    pub fn predict(&mut self, x: &DMatrix<f64>, level: NoiseLevel) -> Result<Prediction> {
        self.nfe += 1;
        self.denoiser.predict(x, level)
    }

    pub fn estimate(&self, pred: &Prediction, x: &DMatrix<f64>, level: NoiseLevel) -> Estimate {
        let x0 = pred.x0(x, level);
        match self.clamp {
            Some(c) => {
                let x0 = x0.map(|v| v.clamp(-c, c));
                let eps = (x - &x0 * level.signal) / level.noise;
                Estimate { x0, eps }
            }
            None => Estimate { eps: pred.epsilon(x, level), x0 },
        }
    }

    /// Records the start-of-step output.
    pub fn note_step(&mut self, pred: &Prediction, x0: &DMatrix<f64>) {
        if let Some(p) = &mut self.path {
            p.outputs.push(pred.value.clone());
            p.x0_predictions.push(x0.clone());
        }
    }

    pub fn note_state(&mut self, x: &DMatrix<f64>) {
        if let Some(p) = &mut self.path {
            p.states.push(x.clone());
        }
    }

    pub fn finish(self, path: &NoisePath, calls_per_step: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            domain: path.domain,
            times: path.times.clone(),
            levels: path.levels.clone(),
            nfe: self.nfe,
            calls_per_step,
            path: self.path,
        }
    }
}

pub(crate) fn require_domain(path: &NoisePath, domain: Domain, sampler: &str) -> Result<()> {
    if path.domain != domain {
        return Err(Error::DomainMismatch(format!("{sampler} needs a {domain:?} grid, got {:?}", path.domain)));
    }
    if path.levels.len() < 2 {
        return Err(Error::Grid("grid must have at least one step".into()));
    }
    Ok(())
}

/// Draws `x_init ~ N(0, I)` of `shape` and runs the configured sampler.
pub fn sample<R: Rng + ?Sized>(
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    shape: (usize, usize),
    rng: &mut R,
    record_path: bool,
) -> Result<(DMatrix<f64>, TrajectoryRecord)> {
    config.validate()?;
    if path.domain != config.domain() {
        return Err(Error::DomainMismatch(format!(
            "sampler {} needs a {:?} grid, got {:?}",
            config.kind.name(),
            config.domain(),
            path.domain
        )));
    }
    let x_init = standard_normal(shape.0, shape.1, rng);
    let opts = RunOptions { clamp: config.clamp, record_path };
    match config.kind {
        SamplerKind::Ddpm => ddpm_sample(denoiser, path, x_init, rng, opts),
        SamplerKind::Ddim => ddim_sample(denoiser, path, x_init, config.eta, rng, opts),
        SamplerKind::DpmSolver => dpm_solver_sample(denoiser, path, x_init, config.order, opts),
        SamplerKind::DpmSolverPp => dpm_solver_pp_sample(denoiser, path, x_init, opts),
        SamplerKind::EulerFlow => euler_flow_sample(denoiser, path, x_init, opts),
        SamplerKind::EulerMaruyama => euler_maruyama_sample(denoiser, path, x_init, config.sde_noise_scale, rng, opts),
    }
}
