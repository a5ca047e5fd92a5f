use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::annealing::{SchedulerKind, StepScheduler};
use crate::error::{Error, Result};
use crate::process::{KernelKind, OrderPolicy, SamplingDomain, TokenProcess, TokenProcessSpec};
use crate::samplers::{SamplerConfig, SamplerKind};
use crate::schedule::{DiffusionSchedule, ScheduleKind};

/// Everything a harness run depends on, as flat JSON keys.
///
/// Unknown keys are rejected so a typo cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub token_dim: usize,
    pub kernel: KernelKind,
    pub length_scale: f64,
    pub marginal_std: f64,
    pub mean_field: Option<Vec<Vec<f64>>>,
    pub jitter: f64,

    pub order: OrderPolicy,
    pub ar_steps: usize,
    /// Seed of the generation orders; the master seed when absent.
    pub order_seed: Option<u64>,

    pub schedule: ScheduleKind,
    pub base_step_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
    /// Start diffusion sampling at `offset_index` instead of the last base index.
    pub time_offset: bool,
    pub offset_index: usize,
    pub flow_start_time: f64,

    pub sampler: SamplerKind,
    pub eta: f64,
    pub solver_order: u8,
    pub sde_noise_scale: f64,
    pub clamp: Option<f64>,

    pub scheduler: SchedulerKind,
    pub t_early: usize,
    pub t_late: usize,
    pub min_steps: usize,

    pub sweep_kind: SchedulerKind,
    pub sweep_t_early: Vec<usize>,
    pub sweep_t_late: Vec<usize>,
    /// Append a constant scheduler at full grid resolution to the sweep.
    pub sweep_reference: bool,

    pub sequences: usize,
    pub seed: u64,
    pub draws_per_step: usize,
    pub variance_references: usize,
    pub probe_seeds: usize,
    pub straightness_trajectories: usize,
    pub t_draws: usize,
    pub record_paths: bool,

    /// Where artifacts go. Not part of the config hash or the echoed config.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = TokenProcessSpec::default();
        Self {
            grid_height: p.grid_height,
            grid_width: p.grid_width,
            token_dim: p.token_dim,
            kernel: p.kernel,
            length_scale: p.length_scale,
            marginal_std: p.marginal_std,
            mean_field: p.mean_field,
            jitter: p.jitter,
            order: OrderPolicy::Random,
            ar_steps: 16,
            order_seed: None,
            schedule: ScheduleKind::Cosine,
            base_step_count: crate::schedule::DEFAULT_BASE_STEPS,
            beta_start: 1e-4,
            beta_end: 0.02,
            cosine_offset: crate::schedule::DEFAULT_COSINE_OFFSET,
            time_offset: false,
            offset_index: crate::schedule::DEFAULT_OFFSET_INDEX,
            flow_start_time: 1.0,
            sampler: SamplerKind::Ddim,
            eta: 0.0,
            solver_order: 1,
            sde_noise_scale: crate::samplers::DEFAULT_SDE_NOISE_SCALE,
            clamp: None,
            scheduler: SchedulerKind::Linear,
            t_early: 50,
            t_late: 5,
            min_steps: 1,
            sweep_kind: SchedulerKind::Linear,
            sweep_t_early: vec![50],
            sweep_t_late: vec![5, 15, 25, 50],
            sweep_reference: true,
            sequences: 1000,
            seed: 0,
            draws_per_step: 100,
            variance_references: 20,
            probe_seeds: 1000,
            straightness_trajectories: 500,
            t_draws: crate::diagnostics::DEFAULT_T_DRAWS,
            record_paths: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pretty JSON of every key except `output_dir`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key=value`; the value is parsed as JSON and falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{assignment}` is not of the form key=value")))?;
        let key = key.trim().replace('-', "_");
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        if key == "output_dir" {
            self.output_dir = match value {
                Value::Null => None,
                _ => Some(PathBuf::from(raw)),
            };
            return Ok(());
        }
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config is a JSON object");
        if !map.contains_key(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        map.insert(key.clone(), value);
        let mut next: ExperimentConfig =
            serde_json::from_value(obj).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        next.output_dir = self.output_dir.take();
        *self = next;
        Ok(())
    }

    pub fn process_spec(&self) -> TokenProcessSpec {
        TokenProcessSpec {
            grid_height: self.grid_height,
            grid_width: self.grid_width,
            token_dim: self.token_dim,
            kernel: self.kernel,
            length_scale: self.length_scale,
            marginal_std: self.marginal_std,
            mean_field: self.mean_field.clone(),
            jitter: self.jitter,
        }
    }

    pub fn process(&self) -> Result<TokenProcess> {
        TokenProcess::new(self.process_spec())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            eta: self.eta,
            order: self.solver_order,
            sde_noise_scale: self.sde_noise_scale,
            clamp: self.clamp,
        }
    }

    pub fn step_scheduler(&self) -> Result<StepScheduler> {
        StepScheduler::new(self.scheduler, self.t_early, self.t_late, self.ar_steps)?.with_min_steps(self.min_steps)
    }

    pub fn diffusion_schedule(&self) -> Result<DiffusionSchedule> {
        match self.schedule {
            ScheduleKind::Linear => DiffusionSchedule::linear(self.base_step_count, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => DiffusionSchedule::cosine(self.base_step_count, self.cosine_offset),
        }
    }

    /// First base index of every diffusion grid.
    pub fn start_index(&self) -> usize {
        if self.time_offset {
            self.offset_index
        } else {
            self.base_step_count.saturating_sub(1)
        }
    }

    /// Sampling domain implied by the sampler kind.
    pub fn sampling_domain(&self) -> Result<SamplingDomain> {
        match self.sampler.domain() {
            crate::schedule::Domain::DiscreteDiffusion => {
                Ok(SamplingDomain::Diffusion { schedule: self.diffusion_schedule()?, start_index: self.start_index() })
            }
            crate::schedule::Domain::ContinuousFlow => Ok(SamplingDomain::Flow { start_time: self.flow_start_time }),
        }
    }

    /// Step count of a full-resolution grid: every base index on diffusion, `base_step_count` on flow.
    pub fn reference_steps(&self) -> usize {
        match self.sampler.domain() {
            crate::schedule::Domain::DiscreteDiffusion => self.start_index(),
            crate::schedule::Domain::ContinuousFlow => self.base_step_count,
        }
    }

    /// Cartesian product of the sweep lists, then the reference row when enabled.
    pub fn sweep_schedulers(&self) -> Result<Vec<StepScheduler>> {
        let mut out = Vec::new();
        for &te in &self.sweep_t_early {
            for &tl in &self.sweep_t_late {
                out.push(StepScheduler::new(self.sweep_kind, te, tl, self.ar_steps)?.with_min_steps(self.min_steps)?);
            }
        }
        if self.sweep_reference {
            let reference = StepScheduler::constant(self.reference_steps(), self.ar_steps)?;
            if !out.contains(&reference) {
                out.push(reference);
            }
        }
        Ok(out)
    }

    pub fn effective_order_seed(&self) -> u64 {
        self.order_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.process_spec().validate()?;
        self.sampler_config().validate()?;
        self.step_scheduler()?;
        if self.ar_steps > self.grid_height * self.grid_width {
            return Err(Error::param("ar_steps", "cannot exceed the number of tokens"));
        }
        if self.sampler.domain() == crate::schedule::Domain::DiscreteDiffusion {
            let schedule = self.diffusion_schedule()?;
            if self.start_index() == 0 || self.start_index() >= schedule.base_step_count() {
                return Err(Error::param("offset_index", "must lie in [1, base_step_count)"));
            }
        } else if !(self.flow_start_time > 0.0 && self.flow_start_time <= 1.0) {
            return Err(Error::param("flow_start_time", "must lie in (0, 1]"));
        }
        if self.sweep_t_early.is_empty() || self.sweep_t_late.is_empty() {
            return Err(Error::param("sweep_t_early", "sweep lists must not be empty"));
        }
        self.sweep_schedulers()?;
        if self.sequences == 0 {
            return Err(Error::param("sequences", "must be positive"));
        }
        if self.t_draws == 0 {
            return Err(Error::param("t_draws", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_stable() {
        let c = ExperimentConfig { seed: 9, clamp: Some(3.0), ..Default::default() };
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: Some("/tmp/x".into()), ..Default::default() };
        assert_eq!(a.hash(), b.hash());
        assert!(!b.to_json().contains("output_dir"));
        assert_ne!(a.hash(), ExperimentConfig { seed: 1, ..Default::default() }.hash());
    }

    #[test]
    fn partial_json_uses_defaults_and_rejects_unknown_keys() {
        let c = ExperimentConfig::from_json(r#"{"seed": 4, "sampler": "dpm_solver", "solver_order": 2}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.sampler_config().calls_per_step(), 2);
        assert_eq!(c.ar_steps, 16);
        assert!(ExperimentConfig::from_json(r#"{"sead": 4}"#).is_err());
    }

    #[test]
    fn set_overrides() {
        let mut c = ExperimentConfig::default();
        c.set("sequences=12").unwrap();
        c.set("sampler=euler_flow").unwrap();
        c.set("sweep_t_late=[5,10]").unwrap();
        c.set("output_dir=/tmp/out").unwrap();
        assert_eq!(c.sequences, 12);
        assert_eq!(c.sampler, SamplerKind::EulerFlow);
        assert_eq!(c.sweep_t_late, vec![5, 10]);
        assert_eq!(c.output_dir, Some(PathBuf::from("/tmp/out")));
        assert!(c.set("nope=1").is_err());
        assert!(c.set("sequences=abc").is_err());
        assert!(c.set("sequences").is_err());
        assert_eq!(c.sequences, 12);
    }

    #[test]
    fn sweep_grid_and_reference() {
        let c = ExperimentConfig::default();
        let s = c.sweep_schedulers().unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[4], StepScheduler::constant(999, 16).unwrap());
        let off = ExperimentConfig { time_offset: true, ..Default::default() };
        assert_eq!(off.reference_steps(), 950);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig { ar_steps: 17, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { t_late: 0, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { time_offset: true, offset_index: 1000, ..Default::default() }.validate().is_err());
        let flow = ExperimentConfig { sampler: SamplerKind::EulerFlow, flow_start_time: 0.0, ..Default::default() };
        assert!(flow.validate().is_err());
    }
}
