use nalgebra::DMatrix;
use rand::Rng;

use super::{require_domain, Denoiser, Evaluator, RunOptions, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::process::standard_normal;
use crate::schedule::{Domain, NoiseLevel, NoisePath};

type Sampled = Result<(DMatrix<f64>, TrajectoryRecord)>;

/// Ancestral sampling with the fixed lower-bound posterior variance.
///
/// A hop from `t` to `s` draws from `q(x_s | x_t, x0_hat)`; the hop into the
/// clean endpoint has zero variance and returns `x0_hat`.
pub fn ddpm_sample<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    x_init: DMatrix<f64>,
    rng: &mut R,
    opts: RunOptions,
) -> Sampled {
    require_domain(path, Domain::DiscreteDiffusion, "ddpm")?;
    let mut ev = Evaluator::new(denoiser, opts, &x_init);
    let mut x = x_init;
    for w in path.levels.windows(2) {
        let (lt, ls) = (w[0], w[1]);
        let pred = ev.predict(&x, lt)?;
        let est = ev.estimate(&pred, &x, lt);
        ev.note_step(&pred, &est.x0);

        let ab_t = lt.signal * lt.signal;
        let ab_s = ls.signal * ls.signal;
        let alpha_ts = ab_t / ab_s;
        let beta_ts = 1.0 - alpha_ts;
        let coef_x0 = ab_s.sqrt() * beta_ts / (1.0 - ab_t);
        let coef_xt = alpha_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let var = (1.0 - ab_s) / (1.0 - ab_t) * beta_ts;
        x = est.x0 * coef_x0 + x * coef_xt;
        if var > 0.0 {
            x += standard_normal(x.nrows(), x.ncols(), rng) * var.sqrt();
        }
        ev.note_state(&x);
    }
    Ok((x, ev.finish(path, 1)))
}

/// DDIM with stochasticity `eta`; `eta = 1` reproduces the ancestral posterior.
pub fn ddim_sample<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    x_init: DMatrix<f64>,
    eta: f64,
    rng: &mut R,
    opts: RunOptions,
) -> Sampled {
    require_domain(path, Domain::DiscreteDiffusion, "ddim")?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::param("eta", format!("{eta} must be >= 0")));
    }
    let mut ev = Evaluator::new(denoiser, opts, &x_init);
    let mut x = x_init;
    for w in path.levels.windows(2) {
        let (lt, ls) = (w[0], w[1]);
        let pred = ev.predict(&x, lt)?;
        let est = ev.estimate(&pred, &x, lt);
        ev.note_step(&pred, &est.x0);

        let ab_t = lt.signal * lt.signal;
        let ab_s = ls.signal * ls.signal;
        let sigma = eta * ((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)).max(0.0).sqrt();
        let dir = (1.0 - ab_s - sigma * sigma).max(0.0).sqrt();
        x = est.x0 * ab_s.sqrt() + est.eps * dir;
        if sigma > 0.0 {
            x += standard_normal(x.nrows(), x.ncols(), rng) * sigma;
        }
        ev.note_state(&x);
    }
    Ok((x, ev.finish(path, 1)))
}

/// First-order exponential-integrator hop in log-SNR: `x_s = (a_s/a_t) x_t - b_s (e^h - 1) eps`.
///
/// Into the clean level `b_s (e^h - 1)` is replaced by its limit `a_s b_t / a_t`.
fn noise_pred_hop(x: &DMatrix<f64>, lt: NoiseLevel, ls: NoiseLevel, eps: &DMatrix<f64>) -> DMatrix<f64> {
    let phi = if ls.is_clean() {
        ls.signal * lt.noise / lt.signal
    } else {
        ls.noise * (ls.log_snr() - lt.log_snr()).exp_m1()
    };
    x * (ls.signal / lt.signal) - eps * phi
}

/// Midpoint level for the second-order step: the log-SNR midpoint, or, when the
/// hop ends at clean data, the midpoint of `noise / signal`.
fn midpoint_level(lt: NoiseLevel, ls: NoiseLevel) -> NoiseLevel {
    if ls.is_clean() {
        let kappa = 0.5 * lt.noise / lt.signal;
        let signal = 1.0 / (1.0 + kappa * kappa).sqrt();
        NoiseLevel { signal, noise: kappa * signal }
    } else {
        NoiseLevel::from_log_snr(0.5 * (lt.log_snr() + ls.log_snr()))
    }
}

/// DPM-Solver (noise prediction), order 1 or the order-2 midpoint variant.
///
/// Order 1 is algebraically DDIM with `eta = 0`. Order 2 spends two denoiser
/// calls per step.
pub fn dpm_solver_sample(
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    x_init: DMatrix<f64>,
    order: u8,
    opts: RunOptions,
) -> Sampled {
    require_domain(path, Domain::DiscreteDiffusion, "dpm_solver")?;
    if !(1..=2).contains(&order) {
        return Err(Error::param("order", format!("{order} must be 1 or 2")));
    }
    let mut ev = Evaluator::new(denoiser, opts, &x_init);
    let mut x = x_init;
    for w in path.levels.windows(2) {
        let (lt, ls) = (w[0], w[1]);
        let pred = ev.predict(&x, lt)?;
        let est = ev.estimate(&pred, &x, lt);
        ev.note_step(&pred, &est.x0);
        x = if order == 1 {
            noise_pred_hop(&x, lt, ls, &est.eps)
        } else {
            let lm = midpoint_level(lt, ls);
            let u = noise_pred_hop(&x, lt, lm, &est.eps);
            let pred_mid = ev.predict(&u, lm)?;
            let eps_mid = ev.estimate(&pred_mid, &u, lm).eps;
            noise_pred_hop(&x, lt, ls, &eps_mid)
        };
        ev.note_state(&x);
    }
    Ok((x, ev.finish(path, usize::from(order))))
}

/// DPM-Solver++ 2M: multistep data-prediction solver, one call per step.
///
/// The first step has no history and runs at order 1, as does the final hop
/// into clean data where the log-SNR step is unbounded.
pub fn dpm_solver_pp_sample(
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    x_init: DMatrix<f64>,
    opts: RunOptions,
) -> Sampled {
    require_domain(path, Domain::DiscreteDiffusion, "dpm_solver_pp")?;
    if path.step_count() < 2 {
        return Err(Error::param("num_steps", "dpm_solver_pp needs at least 2 steps"));
    }
    let mut ev = Evaluator::new(denoiser, opts, &x_init);
    let mut x = x_init;
    let mut history: Option<(DMatrix<f64>, f64)> = None;
    for w in path.levels.windows(2) {
        let (lt, ls) = (w[0], w[1]);
        let pred = ev.predict(&x, lt)?;
        let x0 = ev.estimate(&pred, &x, lt).x0;
        ev.note_step(&pred, &x0);
        if ls.is_clean() {
            x = x0;
            ev.note_state(&x);
            break;
        }
        let h = ls.log_snr() - lt.log_snr();
        let d = match &history {
            Some((x0_prev, h_prev)) => {
                let c = 0.5 * h / h_prev;
                &x0 * (1.0 + c) - x0_prev * c
            }
            None => x0.clone(),
        };
        x = &x * (ls.noise / lt.noise) - d * (ls.signal * (-h).exp_m1());
        history = Some((x0, h));
        ev.note_state(&x);
    }
    Ok((x, ev.finish(path, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::ConditionalGaussian;
    use crate::samplers::{ExactOracle, Parameterization};
    use crate::schedule::{make_diffusion_grid, DiffusionSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(steps: usize) -> NoisePath {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        make_diffusion_grid(&s, steps, 999).unwrap().resolve(Some(&s)).unwrap()
    }

    fn dirac() -> ConditionalGaussian {
        ConditionalGaussian::dirac(vec![0, 1], DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]))
    }

    fn aniso() -> ConditionalGaussian {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.5]);
        ConditionalGaussian::new(vec![0, 1], DMatrix::from_element(2, 3, 0.3), cov)
    }

    fn noise(seed: u64) -> DMatrix<f64> {
        standard_normal(2, 2, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn ddpm_full_grid_dirac() {
        let c = dirac();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, rec) = ddpm_sample(&o, &path(999), noise(0), &mut rng, RunOptions::default()).unwrap();
        assert!((x - c.mean()).abs().max() < 1e-3);
        assert_eq!(rec.nfe, 999);
    }

    #[test]
    fn ddpm_single_step_returns_x0_prediction() {
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let p = path(1);
        let x_init = standard_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, rec) = ddpm_sample(&o, &p, x_init.clone(), &mut rng, RunOptions::default()).unwrap();
        let pred = o.predict(&x_init, p.levels[0]).unwrap();
        let x0 = pred.x0(&x_init, p.levels[0]);
        assert!((x - x0).abs().max() < 1e-12);
        assert_eq!(rec.nfe, 1);
    }

    #[test]
    fn ddim_dirac_x0_constant() {
        let c = dirac();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = RunOptions { record_path: true, ..Default::default() };
        let (x, rec) = ddim_sample(&o, &path(20), noise(3), 0.0, &mut rng, opts).unwrap();
        for x0 in &rec.path.as_ref().unwrap().x0_predictions {
            assert!((x0 - c.mean()).abs().max() < 1e-9);
        }
        assert!((x - c.mean()).abs().max() < 1e-9);
        assert_eq!(rec.path.unwrap().states.len(), 21);
    }

    #[test]
    fn ddim_eta_one_equals_ddpm_samplewise() {
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let x_init = standard_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(8));
        let p = path(25);
        let (a, _) = ddpm_sample(&o, &p, x_init.clone(), &mut ChaCha8Rng::seed_from_u64(2), RunOptions::default()).unwrap();
        let (b, _) =
            ddim_sample(&o, &p, x_init, 1.0, &mut ChaCha8Rng::seed_from_u64(2), RunOptions::default()).unwrap();
        assert!((a - b).abs().max() < 1e-9);
    }

    #[test]
    fn ddim_rejects_negative_eta() {
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal(2, 3, &mut rng);
        assert!(ddim_sample(&o, &path(5), x, -0.1, &mut rng, RunOptions::default()).is_err());
    }

    #[test]
    fn dpm_order_one_is_ddim() {
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        for steps in [1, 5, 50] {
            let x_init = standard_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(steps as u64));
            let p = path(steps);
            let (a, _) = dpm_solver_sample(&o, &p, x_init.clone(), 1, RunOptions::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (b, _) = ddim_sample(&o, &p, x_init, 0.0, &mut rng, RunOptions::default()).unwrap();
            assert!((a - b).abs().max() < 1e-9, "steps={steps}");
        }
    }

    #[test]
    fn dpm_order_two_counts_two_calls() {
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let x_init = standard_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let (_, rec) = dpm_solver_sample(&o, &path(10), x_init.clone(), 2, RunOptions::default()).unwrap();
        assert_eq!(rec.nfe, 20);
        assert_eq!(rec.calls_per_step, 2);
        assert!(dpm_solver_sample(&o, &path(10), x_init, 3, RunOptions::default()).is_err());
    }

    #[test]
    fn dpm_order_two_converges_faster() {
        // pathwise distance to a fine DDIM solve of the same ODE
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let x_init = standard_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (reference, _) = ddim_sample(&o, &path(999), x_init.clone(), 0.0, &mut rng, RunOptions::default()).unwrap();
        let err = |order| {
            let (x, _) = dpm_solver_sample(&o, &path(10), x_init.clone(), order, RunOptions::default()).unwrap();
            (x - &reference).norm()
        };
        assert!(err(2) < err(1), "order2 {} order1 {}", err(2), err(1));
    }

    #[test]
    fn dpm_pp_dirac_and_nfe() {
        let c = dirac();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let opts = RunOptions { record_path: true, ..Default::default() };
        let (x, rec) = dpm_solver_pp_sample(&o, &path(25), noise(2), opts).unwrap();
        assert!((x - c.mean()).abs().max() < 1e-6);
        assert_eq!(rec.nfe, 25);
        for x0 in &rec.path.unwrap().x0_predictions {
            assert!((x0 - c.mean()).abs().max() < 1e-9);
        }
        assert!(dpm_solver_pp_sample(&o, &path(1), noise(2), RunOptions::default()).is_err());
    }

    #[test]
    fn clamp_bounds_x0_predictions() {
        let c = ConditionalGaussian::dirac(vec![0], DMatrix::from_element(1, 2, 5.0));
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let opts = RunOptions { clamp: Some(1.0), record_path: true };
        let x_init = standard_normal(1, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let (x, rec) =
            ddim_sample(&o, &path(10), x_init, 0.0, &mut ChaCha8Rng::seed_from_u64(1), opts).unwrap();
        assert!(rec.path.unwrap().x0_predictions.iter().all(|m| m.abs().max() <= 1.0));
        assert!(x.abs().max() <= 1.0 + 1e-12);
    }

    #[test]
    fn flow_grid_is_rejected() {
        let c = aniso();
        let o = ExactOracle::new(&c, Parameterization::Epsilon);
        let p = crate::schedule::make_flow_grid(4, 1.0).unwrap().resolve(None).unwrap();
        let x = standard_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            ddpm_sample(&o, &p, x, &mut rng, RunOptions::default()),
            Err(Error::DomainMismatch(_))
        ));
    }
}
