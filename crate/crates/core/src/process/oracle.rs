//! Closed-form score, noise and velocity of a diffused conditional.
//!
//! All three work in the eigenbasis of the conditional covariance, where the
//! diffused marginal factorizes into independent scalar Gaussians.

use nalgebra::DMatrix;

use super::ConditionalGaussian;
use crate::error::{Error, Result};

/// Variances below this are treated as exactly zero (limit branches).
pub const LIMIT_THRESHOLD: f64 = 1e-12;

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::param("alpha_bar", format!("{alpha_bar} is outside (0, 1]")));
    }
    Ok(())
}

/// Applies `f(eigenvalue, coordinate, mean coordinate)` entrywise in the eigenbasis and maps back.
fn in_eigenbasis(cond: &ConditionalGaussian, x: &DMatrix<f64>, f: impl Fn(f64, f64, f64) -> f64) -> DMatrix<f64> {
    let u = cond.eigenvectors();
    let y = u.transpose() * x;
    let lam = cond.eigenvalues();
    let c = cond.mean_eig();
    let out = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| f(lam[i], y[(i, j)], c[(i, j)]));
    u * out
}

/// `grad log p(x_t)` for `x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps`, `x_0 ~ cond`.
///
/// The marginal is `N(sqrt(ab) mean, ab Sigma + (1 - ab) I)` per channel.
pub fn exact_score(cond: &ConditionalGaussian, x_t: &DMatrix<f64>, alpha_bar: f64) -> Result<DMatrix<f64>> {
    check_alpha_bar(alpha_bar)?;
    cond.check_shape(x_t)?;
    let sa = alpha_bar.sqrt();
    Ok(in_eigenbasis(cond, x_t, |lam, y, c| {
        let var = alpha_bar * lam + (1.0 - alpha_bar);
        if var < LIMIT_THRESHOLD {
            0.0
        } else {
            -(y - sa * c) / var
        }
    }))
}

/// Posterior mean of the injected noise, `E[eps | x_t] = -sqrt(1 - ab) * score`.
///
/// At `ab = 1` with a degenerate direction the posterior mean at the mode (zero) is returned.
pub fn exact_eps(cond: &ConditionalGaussian, x_t: &DMatrix<f64>, alpha_bar: f64) -> Result<DMatrix<f64>> {
    check_alpha_bar(alpha_bar)?;
    cond.check_shape(x_t)?;
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    Ok(in_eigenbasis(cond, x_t, |lam, y, c| {
        let var = alpha_bar * lam + (1.0 - alpha_bar);
        if var < LIMIT_THRESHOLD {
            0.0
        } else {
            sn * (y - sa * c) / var
        }
    }))
}

/// Bayes-optimal flow velocity `E[eps - x_0 | x_t]` for `x_t = (1 - t) x_0 + t eps`.
pub fn exact_velocity(cond: &ConditionalGaussian, x_t: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param("t", format!("{t} is outside [0, 1]")));
    }
    cond.check_shape(x_t)?;
    let s = 1.0 - t;
    Ok(in_eigenbasis(cond, x_t, |lam, y, c| {
        let var = s * s * lam + t * t;
        if var < LIMIT_THRESHOLD {
            // x_t is the clean token and eps is independent of it
            return -y;
        }
        let resid = y - s * c;
        let eps_mean = t / var * resid;
        let x0_mean = c + s * lam / var * resid;
        eps_mean - x0_mean
    }))
}
