use nalgebra::DMatrix;
use rand::Rng;

use super::{require_domain, Denoiser, Evaluator, RunOptions, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::process::standard_normal;
use crate::schedule::{Domain, NoisePath};

type Sampled = Result<(DMatrix<f64>, TrajectoryRecord)>;

/// Explicit Euler on the flow ODE `dx/dt = v(x, t)`, integrated from high to low `t`.
pub fn euler_flow_sample(
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    x_init: DMatrix<f64>,
    opts: RunOptions,
) -> Sampled {
    require_domain(path, Domain::ContinuousFlow, "euler_flow")?;
    let mut ev = Evaluator::new(denoiser, opts, &x_init);
    let mut x = x_init;
    for (w, lw) in path.times.windows(2).zip(path.levels.windows(2)) {
        let lt = lw[0];
        let pred = ev.predict(&x, lt)?;
        let est = ev.estimate(&pred, &x, lt);
        ev.note_step(&pred, &est.x0);
        let v = if opts.clamp.is_some() { est.eps - &est.x0 } else { pred.velocity(&x, lt) };
        x += v * (w[1] - w[0]);
        ev.note_state(&x);
    }
    Ok((x, ev.finish(path, 1)))
}

/// Euler-Maruyama on the reverse SDE sharing the flow's marginals.
///
/// With diffusion `g(t)^2 = 2 scale t^2` the reverse drift is `v - scale t eps_hat`, where
/// `eps_hat = -t * score`. The last hop into clean data adds no noise. `scale = 0`
/// is the Euler ODE solver and draws nothing from `rng`.
pub fn euler_maruyama_sample<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    path: &NoisePath,
    x_init: DMatrix<f64>,
    scale: f64,
    rng: &mut R,
    opts: RunOptions,
) -> Sampled {
    require_domain(path, Domain::ContinuousFlow, "euler_maruyama")?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::param("sde_noise_scale", format!("{scale} must be >= 0")));
    }
    if scale == 0.0 {
        return euler_flow_sample(denoiser, path, x_init, opts);
    }
    let mut ev = Evaluator::new(denoiser, opts, &x_init);
    let mut x = x_init;
    for (w, lw) in path.times.windows(2).zip(path.levels.windows(2)) {
        let (t, lt) = (w[0], lw[0]);
        let h = w[0] - w[1];
        let pred = ev.predict(&x, lt)?;
        let est = ev.estimate(&pred, &x, lt);
        ev.note_step(&pred, &est.x0);
        let v = &est.eps - &est.x0;
        x -= v * h + &est.eps * (h * scale * t);
        if !lw[1].is_clean() {
            x += standard_normal(x.nrows(), x.ncols(), rng) * (t * (2.0 * scale * h).sqrt());
        }
        ev.note_state(&x);
    }
    Ok((x, ev.finish(path, 1)))
}
