//! Diffusion-step annealing (DiSA) for autoregressive token generation.
//!
//! The crate pairs step schedulers that shrink the per-token diffusion budget
//! as generation proceeds with a synthetic Gaussian token process whose
//! next-token conditionals, scores and velocities are known in closed form.
//! Samplers run against that exact denoiser, so sampling error is the only
//! error left to measure.

pub mod annealing;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod process;
pub mod rng;
pub mod samplers;
pub mod schedule;

pub use annealing::{SchedulerKind, StepScheduler};
pub use error::{Error, Result};
pub use process::{ConditionalGaussian, GenerationOrder, TokenProcess, TokenProcessSpec};
pub use samplers::{SamplerConfig, SamplerKind};
pub use schedule::{DiffusionSchedule, TimeGrid};
