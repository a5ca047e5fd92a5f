use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{tags, trend};
use crate::annealing::StepScheduler;
use crate::error::{Error, Result};
use crate::process::{exact_score, exact_velocity, ConditionalGaussian, Generator};
use crate::rng;
use crate::samplers::{PathRecord, TrajectoryRecord};
use crate::schedule::Domain;

pub const DEFAULT_T_DRAWS: usize = 64;

/// One trajectory's straightness estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StraightnessSample {
    pub value: f64,
    pub used: usize,
    /// Draws dropped because a vector had zero norm.
    pub skipped: usize,
}

fn recorded_path(traj: &TrajectoryRecord, domain: Domain) -> Result<&PathRecord> {
    if traj.domain != domain {
        return Err(Error::DomainMismatch(format!("expected a {domain:?} trajectory, got {:?}", traj.domain)));
    }
    match &traj.path {
        Some(p) if p.states.len() == traj.times.len() && p.states.len() >= 2 => Ok(p),
        _ => Err(Error::param("trajectory", "path with both endpoints was not recorded")),
    }
}

/// `t_draws` stratified uniform fractions in `[0, 1)`.
fn stratified<R: Rng + ?Sized>(t_draws: usize, rng: &mut R) -> Vec<f64> {
    (0..t_draws).map(|j| (j as f64 + rng.random::<f64>()) / t_draws as f64).collect()
}

/// Segment containing `t` on a decreasing grid and the fraction travelled into it.
fn locate(times: &[f64], t: f64) -> (usize, f64) {
    let last = times.len() - 2;
    let i = times.windows(2).position(|w| t >= w[1]).unwrap_or(last).min(last);
    let w = (times[i] - t) / (times[i] - times[i + 1]);
    (i, w.clamp(0.0, 1.0))
}

fn lerp(a: &DMatrix<f64>, b: &DMatrix<f64>, w: f64) -> DMatrix<f64> {
    a * (1.0 - w) + b * w
}

/// Flow straightness `E_t ||(x_1 - x_0) - v(x_t, t)||^2` per token; 0 on a straight path.
///
/// `x_t` is interpolated linearly between recorded states and `t` is
/// stratified over `[0, start_time]`.
pub fn straightness_flow<R: Rng + ?Sized>(
    traj: &TrajectoryRecord,
    cond: &ConditionalGaussian,
    t_draws: usize,
    rng: &mut R,
) -> Result<StraightnessSample> {
    let path = recorded_path(traj, Domain::ContinuousFlow)?;
    if t_draws == 0 {
        return Err(Error::param("t_draws", "must be positive"));
    }
    let x1 = &path.states[0];
    let x0 = path.states.last().unwrap();
    let dir = x1 - x0;
    let m = x0.nrows() as f64;
    let mut acc = 0.0;
    for u in stratified(t_draws, rng) {
        let t = traj.times[0] * u;
        let (i, w) = locate(&traj.times, t);
        let xt = lerp(&path.states[i], &path.states[i + 1], w);
        let v = exact_velocity(cond, &xt, t)?;
        acc += (&dir - v).norm_squared() / m;
    }
    Ok(StraightnessSample { value: acc / t_draws as f64, used: t_draws, skipped: 0 })
}

/// `cos(x_0 - x_t, score(x_t))`, or `None` when either vector vanishes.
pub fn diffusion_cosine(
    cond: &ConditionalGaussian,
    x0: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    alpha_bar: f64,
) -> Result<Option<f64>> {
    let score = exact_score(cond, xt, alpha_bar)?;
    let dir = x0 - xt;
    let denom = dir.norm() * score.norm();
    if denom <= 0.0 || !denom.is_finite() {
        return Ok(None);
    }
    Ok(Some((dir.dot(&score) / denom).clamp(-1.0, 1.0)))
}

/// Mean cosine between the score and the direction to the clean token; 1 on a straight path.
///
/// Times are stratified over the grid's index range; `x_t` and `alpha_bar` are
/// interpolated linearly between recorded grid points.
pub fn straightness_diffusion<R: Rng + ?Sized>(
    traj: &TrajectoryRecord,
    cond: &ConditionalGaussian,
    t_draws: usize,
    rng: &mut R,
) -> Result<StraightnessSample> {
    let path = recorded_path(traj, Domain::DiscreteDiffusion)?;
    if t_draws == 0 {
        return Err(Error::param("t_draws", "must be positive"));
    }
    let x0 = path.states.last().unwrap();
    let mut acc = 0.0;
    let mut used = 0;
    for u in stratified(t_draws, rng) {
        let tau = traj.times[0] * u;
        let (i, w) = locate(&traj.times, tau);
        let xt = lerp(&path.states[i], &path.states[i + 1], w);
        let ab = |k: usize| traj.levels[k].signal.powi(2);
        let alpha_bar = ((1.0 - w) * ab(i) + w * ab(i + 1)).min(1.0);
        if let Some(c) = diffusion_cosine(cond, x0, &xt, alpha_bar)? {
            acc += c;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Numerical("every straightness draw was degenerate".into()));
    }
    Ok(StraightnessSample { value: acc / used as f64, used, skipped: t_draws - used })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StraightnessReport {
    pub domain: Domain,
    /// Mean straightness per AR step.
    pub per_step: Vec<f64>,
    pub skipped: Vec<usize>,
    pub t_draws: usize,
    pub trajectories: usize,
    /// Spearman correlation of `per_step` with the AR step index.
    pub trend: f64,
}

impl StraightnessReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ar_step,straightness,skipped,t_draws,trajectories\n");
        for (k, (v, sk)) in self.per_step.iter().zip(&self.skipped).enumerate() {
            s += &format!("{k},{v},{sk},{},{}\n", self.t_draws, self.trajectories);
        }
        s
    }
}

/// Generates `trajectories` sequences and averages each AR step's straightness.
///
/// The metric follows the sampler's domain: flow residual or diffusion cosine.
pub fn straightness_report(
    gen: &Generator,
    scheduler: &StepScheduler,
    trajectories: usize,
    t_draws: usize,
) -> Result<StraightnessReport> {
    if trajectories == 0 {
        return Err(Error::param("trajectories", "must be positive"));
    }
    let domain = gen.domain.domain();
    let per_seq: Vec<Vec<StraightnessSample>> = (0..trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let seq = gen.generate(scheduler, i, true)?;
            seq.steps
                .iter()
                .map(|st| {
                    let mut r = rng::diagnostic_stream(gen.seed, tags::STRAIGHTNESS, i, st.ar_step as u64);
                    let res = match domain {
                        Domain::ContinuousFlow => straightness_flow(&st.trajectory, &st.conditional, t_draws, &mut r),
                        Domain::DiscreteDiffusion => {
                            straightness_diffusion(&st.trajectory, &st.conditional, t_draws, &mut r)
                        }
                    };
                    res.map_err(|e| e.at_step(st.ar_step))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let k_total = scheduler.ar_steps;
    let mut per_step = vec![0.0; k_total];
    let mut skipped = vec![0; k_total];
    for row in &per_seq {
        for (k, s) in row.iter().enumerate() {
            per_step[k] += s.value / trajectories as f64;
            skipped[k] += s.skipped;
        }
    }
    let trend = trend(&per_step);
    Ok(StraightnessReport { domain, per_step, skipped, t_draws, trajectories, trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::standard_normal;
    use crate::samplers::{ddim_sample, euler_flow_sample, ExactOracle, Parameterization, RunOptions};
    use crate::schedule::{make_diffusion_grid, make_flow_grid, DiffusionSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record() -> RunOptions {
        RunOptions { record_path: true, ..Default::default() }
    }

    #[test]
    fn locate_segments() {
        let times = [1.0, 0.5, 0.0];
        assert_eq!(locate(&times, 1.0), (0, 0.0));
        assert_eq!(locate(&times, 0.75), (0, 0.5));
        assert_eq!(locate(&times, 0.5), (0, 1.0));
        assert_eq!(locate(&times, 0.0), (1, 1.0));
    }

    #[test]
    fn dirac_flow_path_is_straight() {
        let mu = DMatrix::from_row_slice(1, 3, &[0.4, -0.2, 1.0]);
        let c = ConditionalGaussian::dirac(vec![0], mu);
        let o = ExactOracle::new(&c, Parameterization::Velocity);
        let p = make_flow_grid(7, 1.0).unwrap().resolve(None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal(1, 3, &mut rng);
        let (_, traj) = euler_flow_sample(&o, &p, x, record()).unwrap();
        let s = straightness_flow(&traj, &c, 64, &mut rng).unwrap();
        assert!(s.value < 1e-8, "{}", s.value);
    }

    #[test]
    fn flow_requires_recorded_path() {
        let c = ConditionalGaussian::dirac(vec![0], DMatrix::zeros(1, 2));
        let o = ExactOracle::new(&c, Parameterization::Velocity);
        let p = make_flow_grid(3, 1.0).unwrap().resolve(None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, traj) = euler_flow_sample(&o, &p, DMatrix::zeros(1, 2), RunOptions::default()).unwrap();
        assert!(straightness_flow(&traj, &c, 8, &mut rng).is_err());
        let (_, traj) = euler_flow_sample(&o, &p, DMatrix::zeros(1, 2), record()).unwrap();
        assert!(straightness_diffusion(&traj, &c, 8, &mut rng).is_err());
    }

    #[test]
    fn dirac_cosine_tends_to_one_near_clean() {
        let mu = DMatrix::from_row_slice(1, 3, &[0.4, -0.2, 1.0]);
        let c = ConditionalGaussian::dirac(vec![0], mu.clone());
        let eps = DMatrix::from_row_slice(1, 3, &[1.0, 0.3, -0.7]);
        for ab in [0.999, 0.99999, 0.9999999f64] {
            let xt = &mu * ab.sqrt() + &eps * (1.0 - ab).sqrt();
            let cos = diffusion_cosine(&c, &mu, &xt, ab).unwrap().unwrap();
            if ab > 0.9999 {
                assert!(cos > 1.0 - 1e-3, "ab={ab} cos={cos}");
            }
        }
        assert_eq!(diffusion_cosine(&c, &mu, &mu, 1.0).unwrap(), None);
    }

    #[test]
    fn diffusion_values_are_cosines() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
        let c = ConditionalGaussian::new(vec![0, 1], DMatrix::from_element(2, 2, 0.5), cov);
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let s = DiffusionSchedule::cosine(1000, 0.008).unwrap();
        let p = make_diffusion_grid(&s, 10, 999).unwrap().resolve(Some(&s)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = standard_normal(2, 2, &mut rng);
            let (_, traj) = ddim_sample(&o, &p, x, 0.0, &mut rng, record()).unwrap();
            let v = straightness_diffusion(&traj, &c, 32, &mut rng).unwrap();
            assert!((-1.0..=1.0).contains(&v.value));
            assert_eq!(v.used + v.skipped, 32);
        }
    }
}
