//! Validations behind `oracle-check`: finite differences, Monte Carlo
//! regression and sampler cross-equivalences on the exact oracle.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::process::{exact_eps, exact_score, exact_velocity, standard_normal, ConditionalGaussian, GenerationOrder, TokenProcess};
use crate::rng;
use crate::samplers::{
    ddim_sample, ddpm_sample, dpm_solver_sample, euler_flow_sample, euler_maruyama_sample, ExactOracle,
    Parameterization, Prediction, RunOptions,
};
use crate::schedule::{make_diffusion_grid, make_flow_grid, DiffusionSchedule, NoiseLevel};

const CHECK_TAG: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// The statistic compared against `tolerance` (relative error, z-score, ...).
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name, passed: value <= tolerance, value, tolerance, detail }
    }
}

pub const CHECK_CSV_HEADER: &str = "check,passed,value,tolerance,detail";

pub fn checks_to_csv(checks: &[CheckOutcome]) -> String {
    let mut s = format!("{CHECK_CSV_HEADER}\n");
    for c in checks {
        s += &format!("{},{},{},{},{}\n", c.name, c.passed, c.value, c.tolerance, c.detail.replace(',', ";"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Joint draws for the regression checks.
    pub mc_samples: usize,
    /// Sequences per sampler in the DDIM/DDPM moment comparison.
    pub moment_draws: usize,
    /// Scale the score by `1 + 1e-3` before the finite-difference check.
    pub corrupt_score: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { seed: 0, mc_samples: 1_000_000, moment_draws: 20_000, corrupt_score: false }
    }
}

fn stream(seed: u64, cell: u64) -> rand_chacha::ChaCha8Rng {
    rng::diagnostic_stream(seed, CHECK_TAG, cell, 0)
}

/// A `targets`-token conditional given an exact draw at `observed` other random positions.
pub fn random_conditional(process: &TokenProcess, observed: usize, targets: usize, seed: u64) -> Result<ConditionalGaussian> {
    let n = process.token_count();
    if observed + targets > n {
        return Err(Error::param("targets", "more positions requested than the grid holds"));
    }
    let mut r = stream(seed, 0);
    let order = GenerationOrder::random(n, n, &mut r)?;
    let perm = order.permutation();
    let joint = process.conditional_on(&[], &DMatrix::zeros(0, process.token_dim()), perm)?;
    let draw = joint.sample(&mut r);
    let obs = &perm[..observed];
    process.conditional_on(obs, &draw.rows(0, observed).into_owned(), &perm[observed..observed + targets])
}

/// Log-density of `x` (one column per channel) under `N(shift, cov)` per channel, through a Cholesky factor.
fn gaussian_log_pdf(x: &DMatrix<f64>, shift: &DMatrix<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let dev = x - shift;
    let w = chol.l().solve_lower_triangular(&dev).expect("triangular solve");
    -0.5 * w.norm_squared()
}

/// Score against a central-difference gradient of the analytic log-density.
pub fn finite_difference_score(cond: &ConditionalGaussian, seed: u64, corrupt: bool) -> Result<CheckOutcome> {
    let m = cond.token_count();
    let d = cond.token_dim();
    let mut r = stream(seed, 1);
    let mut worst: f64 = 0.0;
    for &ab in &[0.05, 0.3, 0.7, 0.95, 0.999] {
        let cov = cond.covariance() * ab + DMatrix::identity(m, m) * (1.0 - ab);
        let chol = Cholesky::new(cov).ok_or_else(|| Error::Numerical("diffused covariance not PD".into()))?;
        let shift = cond.mean() * ab.sqrt();
        let x = &shift + standard_normal(m, d, &mut r);
        let mut score = exact_score(cond, &x, ab)?;
        if corrupt {
            score *= 1.0 + 1e-3;
        }
        let mut fd = DMatrix::zeros(m, d);
        for i in 0..m {
            for j in 0..d {
                let h = 1e-5 * x[(i, j)].abs().max(1.0);
                let mut up = x.clone();
                up[(i, j)] += h;
                let mut dn = x.clone();
                dn[(i, j)] -= h;
                fd[(i, j)] = (gaussian_log_pdf(&up, &shift, &chol) - gaussian_log_pdf(&dn, &shift, &chol)) / (2.0 * h);
            }
        }
        worst = worst.max((&score - &fd).norm() / fd.norm());
    }
    Ok(CheckOutcome::new("score_finite_difference", worst, 1e-5, format!("max relative error over 5 noise levels; {m} tokens")))
}

/// Accumulates `X^T X` and `X^T y` for features `[1, x_obs]`.
struct Regression {
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
    yty: DVector<f64>,
    n: usize,
}

impl Regression {
    fn new(features: usize, outputs: usize) -> Self {
        Self {
            xtx: DMatrix::zeros(features + 1, features + 1),
            xty: DMatrix::zeros(features + 1, outputs),
            yty: DVector::zeros(outputs),
            n: 0,
        }
    }

    fn push(&mut self, x: &[f64], y: &[f64]) {
        let mut f = Vec::with_capacity(x.len() + 1);
        f.push(1.0);
        f.extend_from_slice(x);
        let p = f.len();
        for a in 0..p {
            for b in a..p {
                self.xtx[(a, b)] += f[a] * f[b];
            }
            for (o, &yo) in y.iter().enumerate() {
                self.xty[(a, o)] += f[a] * yo;
            }
        }
        for (o, &yo) in y.iter().enumerate() {
            self.yty[o] += yo * yo;
        }
        self.n += 1;
    }

    fn merge(mut self, other: Regression) -> Regression {
        self.xtx += other.xtx;
        self.xty += other.xty;
        self.yty += other.yty;
        self.n += other.n;
        self
    }

    /// Predictions at `x`, their standard errors and the residual variance per output.
    fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let p = self.xtx.nrows();
        let xtx = DMatrix::from_fn(p, p, |a, b| if a <= b { self.xtx[(a, b)] } else { self.xtx[(b, a)] });
        let chol = Cholesky::new(xtx).ok_or_else(|| Error::Numerical("regression design is singular".into()))?;
        let beta = chol.solve(&self.xty);
        let mut f = DVector::zeros(p);
        f[0] = 1.0;
        for (i, v) in x.iter().enumerate() {
            f[i + 1] = *v;
        }
        let leverage = f.dot(&chol.solve(&f));
        let dof = (self.n - p) as f64;
        let mut pred = Vec::new();
        let mut se = Vec::new();
        let mut s2 = Vec::new();
        for o in 0..beta.ncols() {
            let b = beta.column(o);
            let rss = self.yty[o] - b.dot(&self.xty.column(o));
            let var = rss / dof;
            pred.push(f.dot(&b));
            se.push((var * leverage).sqrt());
            s2.push(var);
        }
        Ok((pred, se, s2))
    }
}

const CHUNKS: usize = 16;

/// Conditional mean and variance of one target against a regression over joint draws.
///
/// Returns the larger of the two z-scores (mean and residual variance).
pub fn monte_carlo_conditional(process: &TokenProcess, observed: usize, samples: usize, seed: u64) -> Result<CheckOutcome> {
    let n = process.token_count();
    if observed + 1 > n {
        return Err(Error::param("observed", "leaves no target position"));
    }
    let mut r = stream(seed, 2);
    let order = GenerationOrder::random(n, n, &mut r)?;
    let obs: Vec<usize> = order.permutation()[..observed].to_vec();
    let target = order.permutation()[observed];
    let chol = Cholesky::new(process.covariance().clone())
        .ok_or_else(|| Error::Numerical("joint covariance is not PD".into()))?;
    let l = chol.l();
    let mu = process.mean().column(0).into_owned();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> DVector<f64> {
        let z = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        &mu + &l * z
    };

    let test_point = draw(&mut r);
    let per_chunk = samples.div_ceil(CHUNKS);
    let reg = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut g = rng::diagnostic_stream(seed, CHECK_TAG, 100 + c as u64, 0);
            let mut reg = Regression::new(observed, 1);
            let mut xo = vec![0.0; observed];
            for _ in 0..per_chunk.min(samples.saturating_sub(c * per_chunk)) {
                let x = draw(&mut g);
                for (slot, &p) in xo.iter_mut().zip(&obs) {
                    *slot = x[p];
                }
                reg.push(&xo, &[x[target]]);
            }
            reg
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(Regression::merge)
        .expect("at least one chunk");
    let xo: Vec<f64> = obs.iter().map(|&p| test_point[p]).collect();
    let (pred, se, s2) = reg.predict(&xo)?;

    let d = process.token_dim();
    let obs_values = DMatrix::from_fn(observed, d, |i, _| xo[i]);
    let cond = process.conditional_on(&obs, &obs_values, &[target])?;
    let exact_mean = cond.mean()[(0, 0)];
    let exact_var = cond.covariance()[(0, 0)];
    let z_mean = (pred[0] - exact_mean).abs() / se[0];
    let z_var = (s2[0] - exact_var).abs() / (exact_var * (2.0 / (reg.n - observed - 1) as f64).sqrt());
    Ok(CheckOutcome::new(
        "conditional_monte_carlo",
        z_mean.max(z_var),
        3.0,
        format!(
            "{samples} joint draws; {observed} observed; mean {:.6} vs {exact_mean:.6} (z={z_mean:.2}); var {:.6} vs {exact_var:.6} (z={z_var:.2})",
            pred[0], s2[0]
        ),
    ))
}

/// `E[x_0 | x_t]` implied by the exact velocity against a regression of `x_0` on `x_t`.
pub fn monte_carlo_velocity(cond: &ConditionalGaussian, t: f64, samples: usize, seed: u64) -> Result<CheckOutcome> {
    let m = cond.token_count();
    let single = ConditionalGaussian::new(
        cond.target_positions().to_vec(),
        cond.mean().columns(0, 1).into_owned(),
        cond.covariance().clone(),
    );
    let per_chunk = samples.div_ceil(CHUNKS);
    let reg = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut g = rng::diagnostic_stream(seed, CHECK_TAG, 200 + c as u64, 0);
            let mut reg = Regression::new(m, m);
            for _ in 0..per_chunk.min(samples.saturating_sub(c * per_chunk)) {
                let x0 = single.sample(&mut g);
                let eps = standard_normal(m, 1, &mut g);
                let xt = &x0 * (1.0 - t) + eps * t;
                reg.push(xt.as_slice(), x0.as_slice());
            }
            reg
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(Regression::merge)
        .expect("at least one chunk");
    let mut r = stream(seed, 3);
    let xt = &single.sample(&mut r) * (1.0 - t) + standard_normal(m, 1, &mut r) * t;
    let (pred, se, _) = reg.predict(xt.as_slice())?;
    let v = exact_velocity(&single, &xt, t)?;
    let x0_hat = &xt - v * t;
    let z = (0..m).map(|i| (pred[i] - x0_hat[i]).abs() / se[i]).fold(0.0, f64::max);
    Ok(CheckOutcome::new(
        "velocity_posterior_monte_carlo",
        z,
        3.0,
        format!("{samples} pairs at t={t}; max z over {m} coordinates"),
    ))
}

/// Trace of a fixed target's conditional covariance as the observed prefix grows.
///
/// The value is the largest increase seen; conditioning may only tighten.
pub fn trace_monotonicity(process: &TokenProcess, orders: usize, seed: u64) -> Result<CheckOutcome> {
    let n = process.token_count();
    let d = process.token_dim();
    let mut r = stream(seed, 4);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..orders {
        let order = GenerationOrder::random(n, n, &mut r)?;
        let perm = order.permutation();
        let targets = &perm[n - 2..];
        let mut prev = f64::INFINITY;
        for j in 0..=n - 2 {
            let obs = &perm[..j];
            let tr = process.conditional_on(obs, &DMatrix::zeros(j, d), targets)?.trace();
            if prev.is_finite() {
                worst = worst.max(tr - prev);
            }
            prev = tr;
        }
    }
    Ok(CheckOutcome::new(
        "trace_non_increase",
        worst.max(0.0),
        1e-9,
        format!("{orders} random orders; largest trace increase {worst:.3e}"),
    ))
}

/// Closed-form links between score, noise and velocity predictions.
pub fn parameterization_identities(cond: &ConditionalGaussian, seed: u64) -> Result<CheckOutcome> {
    let m = cond.token_count();
    let d = cond.token_dim();
    let mut r = stream(seed, 5);
    let mut worst: f64 = 0.0;
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(1e-300);
    for &ab in &[0.02, 0.4, 0.8, 0.99] {
        let level = NoiseLevel::from_alpha_bar(ab);
        let x = cond.mean() * level.signal + standard_normal(m, d, &mut r);
        let score = exact_score(cond, &x, ab)?;
        let eps = exact_eps(cond, &x, ab)?;
        worst = worst.max(rel(&eps, &(&score * -level.noise)));
        let p = Prediction::new(Parameterization::Epsilon, eps.clone());
        for kind in [Parameterization::Score, Parameterization::Velocity] {
            let back = p.convert(kind, &x, level).convert(Parameterization::Epsilon, &x, level);
            worst = worst.max(rel(&back.value, &eps));
        }
        // the flow path is the diffusion path rescaled by 1 / (signal + noise)
        let scale = level.signal + level.noise;
        let v_flow = exact_velocity(cond, &(&x / scale), level.noise / scale)?;
        worst = worst.max(rel(&p.velocity(&x, level), &v_flow));
    }
    Ok(CheckOutcome::new("parameterization_identities", worst, 1e-9, "eps/score/velocity round trips and flow equivalence".into()))
}

/// DPM-Solver order 1 against deterministic DDIM from the same initial noise.
pub fn dpm1_matches_ddim(cond: &ConditionalGaussian, schedule: &DiffusionSchedule, start_index: usize, seed: u64) -> Result<CheckOutcome> {
    let o = ExactOracle::new(cond, Parameterization::Epsilon);
    let mut r = stream(seed, 6);
    let mut worst: f64 = 0.0;
    for steps in [1, 5, 10, 50] {
        let path = make_diffusion_grid(schedule, steps, start_index)?.resolve(Some(schedule))?;
        let x = standard_normal(cond.token_count(), cond.token_dim(), &mut r);
        let (a, _) = ddim_sample(&o, &path, x.clone(), 0.0, &mut r, RunOptions::default())?;
        let (b, _) = dpm_solver_sample(&o, &path, x, 1, RunOptions::default())?;
        worst = worst.max((a - b).amax());
    }
    Ok(CheckOutcome::new("dpm1_equals_ddim", worst, 1e-9, "max elementwise difference over 1/5/10/50 steps".into()))
}

fn moments(draws: &[DMatrix<f64>]) -> (DVector<f64>, DMatrix<f64>, usize) {
    let m = draws[0].nrows();
    let cols: usize = draws.iter().map(|x| x.ncols()).sum();
    let mut all = DMatrix::zeros(m, cols);
    let mut c = 0;
    for x in draws {
        all.columns_mut(c, x.ncols()).copy_from(x);
        c += x.ncols();
    }
    let (mean, cov) = crate::diagnostics::gaussian_fit(&all).expect("at least two columns");
    (mean, cov, cols)
}

/// DDIM with `eta = 1` and DDPM on independent noise: per-coordinate mean and variance z-scores.
pub fn ddim_eta1_matches_ddpm(
    cond: &ConditionalGaussian,
    schedule: &DiffusionSchedule,
    start_index: usize,
    draws: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let o = ExactOracle::new(cond, Parameterization::Epsilon);
    let path = make_diffusion_grid(schedule, 50, start_index)?.resolve(Some(schedule))?;
    let (m, d) = (cond.token_count(), cond.token_dim());
    let run = |which: u64| -> Result<Vec<DMatrix<f64>>> {
        (0..draws as u64)
            .into_par_iter()
            .map(|i| {
                let mut g = rng::diagnostic_stream(seed, CHECK_TAG, 1000 + which, i);
                let x = standard_normal(m, d, &mut g);
                let out = if which == 0 {
                    ddim_sample(&o, &path, x, 1.0, &mut g, RunOptions::default())?
                } else {
                    ddpm_sample(&o, &path, x, &mut g, RunOptions::default())?
                };
                Ok(out.0 - cond.mean())
            })
            .collect()
    };
    let (m1, c1, n) = moments(&run(0)?);
    let (m2, c2, _) = moments(&run(1)?);
    let nf = n as f64;
    let mut z: f64 = 0.0;
    for i in 0..m {
        let (v1, v2) = (c1[(i, i)], c2[(i, i)]);
        z = z.max((m1[i] - m2[i]).abs() / ((v1 + v2) / nf).sqrt());
        z = z.max((v1 - v2).abs() / (2.0 * (v1 * v1 + v2 * v2) / nf).sqrt());
    }
    Ok(CheckOutcome::new(
        "ddim_eta1_matches_ddpm",
        z,
        4.0,
        format!("{n} columns per sampler at 50 steps; max z over means and variances"),
    ))
}

/// Euler-Maruyama with zero noise scale reproduces Euler bit for bit.
pub fn em_zero_matches_euler(cond: &ConditionalGaussian, seed: u64) -> Result<CheckOutcome> {
    let o = ExactOracle::new(cond, Parameterization::Velocity);
    let mut r = stream(seed, 7);
    let mut mismatches = 0usize;
    for steps in [1, 7, 40] {
        let path = make_flow_grid(steps, 1.0)?.resolve(None)?;
        let x = standard_normal(cond.token_count(), cond.token_dim(), &mut r);
        let (a, _) = euler_flow_sample(&o, &path, x.clone(), RunOptions::default())?;
        let (b, _) = euler_maruyama_sample(&o, &path, x, 0.0, &mut r, RunOptions::default())?;
        mismatches += a.iter().zip(b.iter()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    }
    Ok(CheckOutcome::new("em_zero_equals_euler", mismatches as f64, 0.0, "bitwise comparison over 1/7/40 steps".into()))
}

/// The full suite on `process`, in a fixed order.
pub fn run_oracle_checks(
    process: &TokenProcess,
    schedule: &DiffusionSchedule,
    start_index: usize,
    opts: CheckOptions,
) -> Result<Vec<CheckOutcome>> {
    let n = process.token_count();
    let observed = (n / 2).min(n.saturating_sub(3));
    let cond3 = random_conditional(process, observed, 3.min(n), opts.seed)?;
    let cond2 = random_conditional(process, observed.min(n.saturating_sub(2)), 2.min(n), opts.seed.wrapping_add(1))?;
    Ok(vec![
        finite_difference_score(&cond3, opts.seed, opts.corrupt_score)?,
        monte_carlo_conditional(process, (n / 2).min(n - 1), opts.mc_samples, opts.seed)?,
        monte_carlo_velocity(&cond3, 0.5, opts.mc_samples, opts.seed)?,
        trace_monotonicity(process, 20, opts.seed)?,
        parameterization_identities(&cond3, opts.seed)?,
        dpm1_matches_ddim(&cond3, schedule, start_index, opts.seed)?,
        ddim_eta1_matches_ddpm(&cond2, schedule, start_index, opts.moment_draws, opts.seed)?,
        em_zero_matches_euler(&cond3, opts.seed)?,
    ])
}
