//! Straightness, sampling variance, probe error and Gaussian W2 quality metrics.

mod evidence;
mod straightness;
mod sweep;

pub use evidence::{probe_error, sampling_variance, ProbeReport, VarianceReport};
pub use straightness::{
    diffusion_cosine, straightness_diffusion, straightness_flow, straightness_report, StraightnessReport,
    StraightnessSample, DEFAULT_T_DRAWS,
};
pub use sweep::{quality_sweep, SweepReport, SweepRow, SweepSummary};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Stream tags keeping each diagnostic's randomness disjoint.
pub(crate) mod tags {
    pub const STRAIGHTNESS: u64 = 1;
    pub const VARIANCE: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const SWEEP_FLOOR: u64 = 4;
}

fn check_symmetric(a: &DMatrix<f64>, name: &'static str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::param(name, "must be square"));
    }
    let scale = a.abs().max().max(1.0);
    if (a - a.transpose()).abs().max() > 1e-9 * scale {
        return Err(Error::param(name, "must be symmetric"));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix; round-off negatives are floored at 0.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a, "matrix")?;
    let SymmetricEigen { eigenvalues, eigenvectors } = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let tol = 1e-10 * eigenvalues.amax().max(1.0);
    if let Some(v) = eigenvalues.iter().find(|&&v| v < -tol) {
        return Err(Error::Numerical(format!("matrix is not positive semi-definite (eigenvalue {v:.3e})")));
    }
    let root = eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eigenvectors * DMatrix::from_diagonal(&root) * eigenvectors.transpose())
}

/// Bures-Wasserstein distance between `N(mean1, cov1)` and `N(mean2, cov2)`.
pub fn w2_gaussian(mean1: &DVector<f64>, cov1: &DMatrix<f64>, mean2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let m = mean1.len();
    if mean2.len() != m || cov1.shape() != (m, m) || cov2.shape() != (m, m) {
        return Err(Error::Shape {
            expected: format!("means of length {m} and {m} x {m} covariances"),
            got: format!("{} / {:?} / {:?}", mean2.len(), cov1.shape(), cov2.shape()),
        });
    }
    check_symmetric(cov1, "cov1")?;
    if mean1 == mean2 && cov1 == cov2 {
        return Ok(0.0);
    }
    let s2 = sqrtm_psd(cov2)?;
    sqrtm_psd(cov1)?;
    let mid = &s2 * cov1 * &s2;
    let cross: f64 = SymmetricEigen::new((&mid + mid.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let traces = cov1.trace() + cov2.trace();
    let d2 = (mean1 - mean2).norm_squared() + traces - 2.0 * cross;
    // the trace terms cancel to round-off when the covariances coincide
    if d2 <= 64.0 * f64::EPSILON * traces {
        return Ok(0.0);
    }
    Ok(d2.sqrt())
}

/// Sample mean and unbiased covariance of the columns of `samples` (`m x N`).
pub fn gaussian_fit(samples: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.ncols();
    if n < 2 {
        return Err(Error::param("samples", "need at least 2 samples for a covariance"));
    }
    let mean = samples.column_mean();
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / (n - 1) as f64;
    Ok((mean, cov))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ties share their average rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal lengths");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman correlation of `values` against their index `0, 1, ...`.
pub fn trend(values: &[f64]) -> f64 {
    let idx: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
    spearman(&idx, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_zero_distance() {
        let m = DVector::from_vec(vec![0.1, -0.3]);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        assert_eq!(w2_gaussian(&m, &c, &m, &c).unwrap(), 0.0);
        let c2 = &c * (1.0 + 1e-15);
        assert!(w2_gaussian(&m, &c, &m, &c2).unwrap() < 1e-9);
    }

    #[test]
    fn isotropic_scaling() {
        for d in [1, 3, 5] {
            let z = DVector::zeros(d);
            let i = DMatrix::identity(d, d);
            let w = w2_gaussian(&z, &i, &z, &(&i * 4.0)).unwrap();
            assert!((w - (d as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_closed_form() {
        let a = [0.5, 2.0, 1.3];
        let b = [1.5, 0.2, 1.3];
        let m1: DVector<f64> = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let m2: DVector<f64> = DVector::from_vec(vec![0.5, 1.0, 1.0]);
        let spread: f64 = a.iter().zip(&b).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum();
        let want = (spread + (&m1 - &m2).norm_squared()).sqrt();
        let got = w2_gaussian(
            &m1,
            &DMatrix::from_diagonal(&DVector::from_row_slice(&a)),
            &m2,
            &DMatrix::from_diagonal(&DVector::from_row_slice(&b)),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_or_asymmetric() {
        let z = DVector::zeros(2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let i = DMatrix::identity(2, 2);
        assert!(w2_gaussian(&z, &bad, &z, &i).is_err());
        assert!(w2_gaussian(&z, &i, &z, &bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(w2_gaussian(&z, &asym, &z, &i).is_err());
        assert!(w2_gaussian(&DVector::zeros(3), &i, &z, &i).is_err());
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let r = sqrtm_psd(&a).unwrap();
        assert!((&r * &r - a).abs().max() < 1e-12);
    }

    #[test]
    fn fit_of_known_columns() {
        let s = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let (m, c) = gaussian_fit(&s).unwrap();
        assert_eq!(m[0], 2.5);
        assert!((c[(0, 0)] - 5.0 / 3.0).abs() < 1e-15);
        assert!(gaussian_fit(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(trend(&[1.0, 2.0, 5.0, 9.0]), 1.0);
        assert_eq!(trend(&[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(trend(&[1.0, 1.0, 1.0]), 0.0);
        // ties: ranks [1.5, 1.5, 3]
        let r = spearman(&[0.0, 1.0, 2.0], &[5.0, 5.0, 7.0]);
        assert!((r - 0.8660254037844386).abs() < 1e-12);
    }
}
