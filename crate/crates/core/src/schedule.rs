//! Discrete noise schedules and the time grids samplers walk.
//!
//! A [`DiffusionSchedule`] holds the base-resolution `betas` and their running
//! product `alpha_bars`. A [`TimeGrid`] is a strictly decreasing subsample of
//! that base grid (or of `[0, 1]` for flow matching) whose final point is the
//! clean endpoint. [`NoisePath`] resolves a grid into signal/noise scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE_STEPS: usize = 1000;
pub const DEFAULT_OFFSET_INDEX: usize = 950;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_COSINE_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Base-resolution noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    kind: ScheduleKind,
    base_step_count: usize,
    betas: Vec<f64>,
}

impl TryFrom<RawSchedule> for DiffusionSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        if raw.betas.len() != raw.base_step_count {
            return Err(Error::param(
                "betas",
                format!("length {} does not match base_step_count {}", raw.betas.len(), raw.base_step_count),
            ));
        }
        DiffusionSchedule::from_betas(raw.kind, raw.betas)
    }
}

impl From<DiffusionSchedule> for RawSchedule {
    fn from(s: DiffusionSchedule) -> Self {
        RawSchedule { kind: s.kind, base_step_count: s.betas.len(), betas: s.betas }
    }
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit betas; `alpha_bars` is their running product of `1 - beta`.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::param("base_step_count", "must be at least 2"));
        }
        if let Some(t) = betas.iter().position(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::param("betas", format!("betas[{t}] = {} is outside (0, 1)", betas[t])));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0_f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect::<Vec<_>>();
        if alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::Numerical("alpha_bar underflowed to zero".into()));
        }
        Ok(Self { kind, betas, alpha_bars })
    }

    /// Linearly spaced betas, endpoints inclusive.
    pub fn linear(base_step_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if base_step_count < 2 {
            return Err(Error::param("base_step_count", "must be at least 2"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} is outside (0, 1)")));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::param("beta_end", format!("{beta_end} must lie in [beta_start, 1)")));
        }
        let last = (base_step_count - 1) as f64;
        let betas = (0..base_step_count)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / last)
            .collect();
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    /// Cosine alpha-bar schedule with betas capped at [`MAX_COSINE_BETA`].
    pub fn cosine(base_step_count: usize, small_offset: f64) -> Result<Self> {
        if base_step_count < 2 {
            return Err(Error::param("base_step_count", "must be at least 2"));
        }
        if !(small_offset >= 0.0 && small_offset.is_finite()) {
            return Err(Error::param("small_offset", format!("{small_offset} must be finite and >= 0")));
        }
        let f = |u: f64| cosine_alpha_bar_fn(u, base_step_count, small_offset);
        let betas = (0..base_step_count)
            .map(|t| (1.0 - f((t + 1) as f64) / f(t as f64)).min(MAX_COSINE_BETA))
            .collect();
        Self::from_betas(ScheduleKind::Cosine, betas)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn base_step_count(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, index: usize) -> f64 {
        self.alpha_bars[index]
    }
}

/// `cos^2(((u / N + s) / (1 + s)) * pi / 2)`
pub fn cosine_alpha_bar_fn(u: f64, base_step_count: usize, small_offset: f64) -> f64 {
    let x = (u / base_step_count as f64 + small_offset) / (1.0 + small_offset) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    DiscreteDiffusion,
    ContinuousFlow,
}

/// Strictly decreasing sampling grid ending at the clean endpoint.
///
/// `step_count` hops join consecutive points. For diffusion grids the points
/// are base-schedule indices and the terminal `0` stands for clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", content = "points", rename_all = "snake_case")]
#[serde(try_from = "RawGrid")]
pub enum TimeGrid {
    DiscreteDiffusion(Vec<usize>),
    ContinuousFlow(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(tag = "domain", content = "points", rename_all = "snake_case")]
enum RawGrid {
    DiscreteDiffusion(Vec<usize>),
    ContinuousFlow(Vec<f64>),
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        let grid = match raw {
            RawGrid::DiscreteDiffusion(p) => TimeGrid::DiscreteDiffusion(p),
            RawGrid::ContinuousFlow(p) => TimeGrid::ContinuousFlow(p),
        };
        grid.validate()?;
        Ok(grid)
    }
}

impl TimeGrid {
    pub fn domain(&self) -> Domain {
        match self {
            TimeGrid::DiscreteDiffusion(_) => Domain::DiscreteDiffusion,
            TimeGrid::ContinuousFlow(_) => Domain::ContinuousFlow,
        }
    }

    pub fn step_count(&self) -> usize {
        self.len() - 1
    }

    pub fn len(&self) -> usize {
        match self {
            TimeGrid::DiscreteDiffusion(p) => p.len(),
            TimeGrid::ContinuousFlow(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points as reals (diffusion indices are widened).
    pub fn points(&self) -> Vec<f64> {
        match self {
            TimeGrid::DiscreteDiffusion(p) => p.iter().map(|&i| i as f64).collect(),
            TimeGrid::ContinuousFlow(p) => p.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let pts = self.points();
        if pts.len() < 2 {
            return Err(Error::Grid("a grid needs at least two points".into()));
        }
        if pts.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Grid("points must be strictly decreasing".into()));
        }
        if *pts.last().unwrap() != 0.0 {
            return Err(Error::Grid("final point must be 0".into()));
        }
        if let TimeGrid::ContinuousFlow(p) = self {
            if p[0] > 1.0 {
                return Err(Error::Grid("flow times must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Maps the grid to signal/noise scales. Diffusion grids need their schedule.
    pub fn resolve(&self, schedule: Option<&DiffusionSchedule>) -> Result<NoisePath> {
        match self {
            TimeGrid::DiscreteDiffusion(points) => {
                let schedule = schedule.ok_or_else(|| {
                    Error::DomainMismatch("diffusion grid requires a diffusion schedule".into())
                })?;
                if points[0] >= schedule.base_step_count() {
                    return Err(Error::Grid(format!(
                        "start index {} exceeds schedule length {}",
                        points[0],
                        schedule.base_step_count()
                    )));
                }
                let last = points.len() - 1;
                let levels = points
                    .iter()
                    .enumerate()
                    .map(|(i, &idx)| {
                        if i == last {
                            NoiseLevel::CLEAN
                        } else {
                            NoiseLevel::from_alpha_bar(schedule.alpha_bar(idx))
                        }
                    })
                    .collect();
                Ok(NoisePath { domain: Domain::DiscreteDiffusion, times: self.points(), levels })
            }
            TimeGrid::ContinuousFlow(times) => Ok(NoisePath {
                domain: Domain::ContinuousFlow,
                times: times.clone(),
                levels: times.iter().map(|&t| NoiseLevel::from_flow_time(t)).collect(),
            }),
        }
    }
}

/// `num_steps` hops from `start_index` down to the clean endpoint, rounded half away from zero.
pub fn make_diffusion_grid(schedule: &DiffusionSchedule, num_steps: usize, start_index: usize) -> Result<TimeGrid> {
    if start_index >= schedule.base_step_count() {
        return Err(Error::param(
            "start_index",
            format!("{start_index} must be below base_step_count {}", schedule.base_step_count()),
        ));
    }
    if num_steps == 0 {
        return Err(Error::param("num_steps", "must be at least 1"));
    }
    let points: Vec<usize> = (0..=num_steps)
        .map(|i| (start_index as f64 * (num_steps - i) as f64 / num_steps as f64).round() as usize)
        .collect();
    if points.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Grid(format!(
            "{num_steps} steps from index {start_index} produce duplicate indices; use at most {start_index} steps"
        )));
    }
    Ok(TimeGrid::DiscreteDiffusion(points))
}

/// Uniform flow grid from `start_time` down to `0.0`.
pub fn make_flow_grid(num_steps: usize, start_time: f64) -> Result<TimeGrid> {
    if num_steps == 0 {
        return Err(Error::param("num_steps", "must be at least 1"));
    }
    if !(start_time > 0.0 && start_time <= 1.0) {
        return Err(Error::param("start_time", format!("{start_time} is outside (0, 1]")));
    }
    let times = (0..=num_steps)
        .map(|i| match i {
            0 => start_time,
            i if i == num_steps => 0.0,
            i => start_time * (num_steps - i) as f64 / num_steps as f64,
        })
        .collect();
    Ok(TimeGrid::ContinuousFlow(times))
}

/// `x_t = signal * x_0 + noise * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub signal: f64,
    pub noise: f64,
}

impl NoiseLevel {
    pub const CLEAN: NoiseLevel = NoiseLevel { signal: 1.0, noise: 0.0 };

    pub fn from_alpha_bar(alpha_bar: f64) -> Self {
        Self { signal: alpha_bar.sqrt(), noise: (1.0 - alpha_bar).sqrt() }
    }

    pub fn from_flow_time(t: f64) -> Self {
        Self { signal: 1.0 - t, noise: t }
    }

    /// Half log signal-to-noise ratio, `ln(signal / noise)`.
    pub fn log_snr(&self) -> f64 {
        (self.signal / self.noise).ln()
    }

    /// Variance-preserving level with the given half log-SNR.
    pub fn from_log_snr(lambda: f64) -> Self {
        // signal^2 = sigmoid(2 lambda)
        let signal_sq = 1.0 / (1.0 + (-2.0 * lambda).exp());
        let noise_sq = 1.0 / (1.0 + (2.0 * lambda).exp());
        Self { signal: signal_sq.sqrt(), noise: noise_sq.sqrt() }
    }

    pub fn is_clean(&self) -> bool {
        self.noise == 0.0
    }
}

/// A grid resolved into noise levels; the last level is always clean.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub domain: Domain,
    pub times: Vec<f64>,
    pub levels: Vec<NoiseLevel>,
}

impl NoisePath {
    pub fn step_count(&self) -> usize {
        self.times.len() - 1
    }
}
