//! Synthetic autoregressive token process.
//!
//! Tokens live on a `grid_height x grid_width` lattice and are jointly Gaussian
//! under a stationary spatial kernel, with `token_dim` i.i.d. channels sharing
//! that kernel. Conditioning on already generated tokens gives the exact
//! next-token distribution, which stands in for the backbone's condition vector.

mod generate;
mod oracle;

pub use generate::{generate_sequence, Generator, SamplingDomain, StepRecord, TokenSequence};
pub use oracle::{exact_eps, exact_score, exact_velocity, LIMIT_THRESHOLD};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `sigma^2 exp(-d^2 / (2 l^2))`
    Rbf,
    /// Exponential kernel `sigma^2 exp(-d / l)`; an AR(1) process along each grid line.
    Ar1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProcessSpec {
    pub grid_height: usize,
    pub grid_width: usize,
    pub token_dim: usize,
    pub kernel: KernelKind,
    pub length_scale: f64,
    pub marginal_std: f64,
    /// Per-position mean vectors (`n` rows of `token_dim`); zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_field: Option<Vec<Vec<f64>>>,
    pub jitter: f64,
}

impl Default for TokenProcessSpec {
    fn default() -> Self {
        Self {
            grid_height: 4,
            grid_width: 4,
            token_dim: 4,
            kernel: KernelKind::Rbf,
            length_scale: 2.0,
            marginal_std: 1.0,
            mean_field: None,
            jitter: 1e-8,
        }
    }
}

impl TokenProcessSpec {
    pub fn token_count(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_height == 0 {
            return Err(Error::param("grid_height", "must be positive"));
        }
        if self.grid_width == 0 {
            return Err(Error::param("grid_width", "must be positive"));
        }
        if self.token_dim == 0 {
            return Err(Error::param("token_dim", "must be positive"));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::param("length_scale", "must be positive and finite"));
        }
        // zero is allowed: a point mass at the mean field (up to jitter)
        if !(self.marginal_std >= 0.0 && self.marginal_std.is_finite()) {
            return Err(Error::param("marginal_std", "must be finite and non-negative"));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::param("jitter", "must be positive"));
        }
        if let Some(mf) = &self.mean_field {
            if mf.len() != self.token_count() || mf.iter().any(|row| row.len() != self.token_dim) {
                return Err(Error::param(
                    "mean_field",
                    format!("expected {} rows of length {}", self.token_count(), self.token_dim),
                ));
            }
        }
        Ok(())
    }

    fn coords(&self, position: usize) -> (f64, f64) {
        ((position / self.grid_width) as f64, (position % self.grid_width) as f64)
    }

    fn kernel_value(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        let dist_sq = (ra - rb).powi(2) + (ca - cb).powi(2);
        let var = self.marginal_std * self.marginal_std;
        match self.kernel {
            KernelKind::Rbf => var * (-dist_sq / (2.0 * self.length_scale * self.length_scale)).exp(),
            KernelKind::Ar1 => var * (-dist_sq.sqrt() / self.length_scale).exp(),
        }
    }
}

/// Joint `n x n` covariance (per token channel), jitter on the diagonal.
pub fn joint_covariance(spec: &TokenProcessSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = spec.token_count();
    let mut cov = DMatrix::from_fn(n, n, |i, j| spec.kernel_value(i, j));
    for i in 0..n {
        cov[(i, i)] += spec.jitter;
    }
    if Cholesky::new(cov.clone()).is_none() {
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        return Err(Error::Numerical(format!(
            "joint covariance is not positive definite after jitter (smallest eigenvalue ~ {min_eig:.3e})"
        )));
    }
    Ok(cov)
}

/// A validated process with its joint covariance and mean field.
#[derive(Debug, Clone)]
pub struct TokenProcess {
    spec: TokenProcessSpec,
    covariance: DMatrix<f64>,
    mean: DMatrix<f64>,
}

impl TokenProcess {
    pub fn new(spec: TokenProcessSpec) -> Result<Self> {
        let covariance = joint_covariance(&spec)?;
        let n = spec.token_count();
        let d = spec.token_dim;
        let mean = match &spec.mean_field {
            Some(rows) => DMatrix::from_fn(n, d, |i, j| rows[i][j]),
            None => DMatrix::zeros(n, d),
        };
        Ok(Self { spec, covariance, mean })
    }

    pub fn spec(&self) -> &TokenProcessSpec {
        &self.spec
    }

    pub fn token_count(&self) -> usize {
        self.spec.token_count()
    }

    pub fn token_dim(&self) -> usize {
        self.spec.token_dim
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `n x d` mean field.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    /// Conditional of `targets` given `(position, value)` observations.
    pub fn conditional(&self, observed: &[(usize, Vec<f64>)], targets: &[usize]) -> Result<ConditionalGaussian> {
        let d = self.token_dim();
        let positions: Vec<usize> = observed.iter().map(|(p, _)| *p).collect();
        let mut values = DMatrix::zeros(observed.len(), d);
        for (r, (_, v)) in observed.iter().enumerate() {
            if v.len() != d {
                return Err(Error::Shape { expected: format!("value of length {d}"), got: format!("{}", v.len()) });
            }
            values.row_mut(r).copy_from_slice(v);
        }
        self.conditional_on(&positions, &values, targets)
    }

    /// Schur-complement conditioning through a Cholesky factor of the observed block.
    ///
    /// `observed_values` has one row per observed position.
    pub fn conditional_on(
        &self,
        observed: &[usize],
        observed_values: &DMatrix<f64>,
        targets: &[usize],
    ) -> Result<ConditionalGaussian> {
        let n = self.token_count();
        let d = self.token_dim();
        if targets.is_empty() {
            return Err(Error::param("targets", "must not be empty"));
        }
        if let Some(p) = observed.iter().chain(targets).find(|&&p| p >= n) {
            return Err(Error::param("positions", format!("position {p} is outside the {n}-token grid")));
        }
        let mut seen = vec![false; n];
        for &p in observed.iter().chain(targets) {
            if seen[p] {
                return Err(Error::param("positions", format!("position {p} appears twice")));
            }
            seen[p] = true;
        }
        if observed_values.shape() != (observed.len(), d) {
            return Err(Error::Shape {
                expected: format!("{} x {d}", observed.len()),
                got: format!("{} x {}", observed_values.nrows(), observed_values.ncols()),
            });
        }

        let sigma_tt = self.covariance.select_rows(targets).select_columns(targets);
        let mu_t = self.mean.select_rows(targets);
        if observed.is_empty() {
            return Ok(ConditionalGaussian::new(targets.to_vec(), mu_t, sigma_tt));
        }

        let sigma_oo = self.covariance.select_rows(observed).select_columns(observed);
        let sigma_ot = self.covariance.select_rows(observed).select_columns(targets);
        let chol = Cholesky::new(sigma_oo)
            .ok_or_else(|| Error::Numerical("observed covariance block is singular beyond jitter".into()))?;
        let l = chol.l();
        let a = l
            .solve_lower_triangular(&sigma_ot)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let deviation = observed_values - self.mean.select_rows(observed);
        let w = l
            .solve_lower_triangular(&deviation)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let mean = mu_t + a.transpose() * w;
        let cov = sigma_tt - a.transpose() * &a;
        Ok(ConditionalGaussian::new(targets.to_vec(), mean, cov))
    }
}

/// Exact next-group distribution: `mean` is `m x d`, `covariance` is `m x m`
/// and shared by the `d` independent channels.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    target_positions: Vec<usize>,
    mean: DMatrix<f64>,
    covariance: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    mean_eig: DMatrix<f64>,
}

impl ConditionalGaussian {
    /// Symmetrizes `covariance` and caches its eigendecomposition (negative round-off clamped to 0).
    pub fn new(target_positions: Vec<usize>, mean: DMatrix<f64>, covariance: DMatrix<f64>) -> Self {
        assert_eq!(covariance.nrows(), covariance.ncols(), "covariance must be square");
        assert_eq!(mean.nrows(), covariance.nrows(), "mean rows must match covariance");
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let SymmetricEigen { eigenvalues, eigenvectors } = SymmetricEigen::new(covariance.clone());
        let eigenvalues = eigenvalues.map(|v| v.max(0.0));
        let mean_eig = eigenvectors.transpose() * &mean;
        Self { target_positions, mean, covariance, eigenvalues, eigenvectors, mean_eig }
    }

    /// Point mass at `mean`.
    pub fn dirac(target_positions: Vec<usize>, mean: DMatrix<f64>) -> Self {
        let m = mean.nrows();
        Self::new(target_positions, mean, DMatrix::zeros(m, m))
    }

    pub fn target_positions(&self) -> &[usize] {
        &self.target_positions
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn token_count(&self) -> usize {
        self.mean.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    pub(crate) fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub(crate) fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub(crate) fn mean_eig(&self) -> &DMatrix<f64> {
        &self.mean_eig
    }

    pub(crate) fn check_shape(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != self.mean.shape() {
            return Err(Error::Shape {
                expected: format!("{} x {}", self.mean.nrows(), self.mean.ncols()),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        Ok(())
    }

    /// One exact draw, `mean + U sqrt(L) Z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        &self.mean + self.noise_like(rng)
    }

    /// Zero-mean draw with this covariance.
    pub fn noise_like<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (m, d) = self.mean.shape();
        let z = standard_normal(m, d, rng);
        let scaled = DMatrix::from_fn(m, d, |i, j| self.eigenvalues[i].sqrt() * z[(i, j)]);
        &self.eigenvectors * scaled
    }
}

/// `rows x cols` matrix of standard normals, filled row by row.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Fresh uniform permutation per sequence.
    Random,
    Raster,
}

/// Which positions each AR step produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOrder {
    permutation: Vec<usize>,
    group_sizes: Vec<usize>,
}

impl GenerationOrder {
    pub fn new(permutation: Vec<usize>, group_sizes: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &p in &permutation {
            if p >= n || seen[p] {
                return Err(Error::param("permutation", "must be a bijection on 0..n"));
            }
            seen[p] = true;
        }
        if group_sizes.is_empty() || group_sizes.contains(&0) {
            return Err(Error::param("group_sizes", "must be non-empty and positive"));
        }
        if group_sizes.iter().sum::<usize>() != n {
            return Err(Error::param("group_sizes", format!("must sum to {n}")));
        }
        Ok(Self { permutation, group_sizes })
    }

    /// Splits `n` into `groups` near-equal sizes, larger groups first.
    pub fn equal_groups(n: usize, groups: usize) -> Result<Vec<usize>> {
        if groups == 0 || groups > n {
            return Err(Error::param("ar_steps", format!("must lie in [1, {n}]")));
        }
        Ok((0..groups).map(|g| n / groups + usize::from(g < n % groups)).collect())
    }

    pub fn raster(n: usize, groups: usize) -> Result<Self> {
        Self::new((0..n).collect(), Self::equal_groups(n, groups)?)
    }

    pub fn random<R: Rng + ?Sized>(n: usize, groups: usize, rng: &mut R) -> Result<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self::new(perm, Self::equal_groups(n, groups)?)
    }

    pub fn from_policy<R: Rng + ?Sized>(policy: OrderPolicy, n: usize, groups: usize, rng: &mut R) -> Result<Self> {
        match policy {
            OrderPolicy::Random => Self::random(n, groups, rng),
            OrderPolicy::Raster => Self::raster(n, groups),
        }
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn ar_steps(&self) -> usize {
        self.group_sizes.len()
    }

    /// `(already generated, this step's targets)` for AR step `k`.
    pub fn split_at_step(&self, k: usize) -> (&[usize], &[usize]) {
        let start: usize = self.group_sizes[..k].iter().sum();
        let end = start + self.group_sizes[k];
        (&self.permutation[..start], &self.permutation[start..end])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_covariance() {
        let spec = TokenProcessSpec { grid_height: 1, grid_width: 1, ..Default::default() };
        let c = joint_covariance(&spec).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c[(0, 0)], 1.0 + 1e-8);
    }

    #[test]
    fn long_length_scale_is_fully_correlated() {
        let spec = TokenProcessSpec { grid_height: 2, grid_width: 1, length_scale: 1e6, ..Default::default() };
        let c = joint_covariance(&spec).unwrap();
        assert!((c[(0, 1)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pathological_length_scale_reports_eigenvalue() {
        let spec = TokenProcessSpec { length_scale: 1e6, jitter: 1e-300, ..Default::default() };
        let err = joint_covariance(&spec).unwrap_err();
        assert!(err.to_string().contains("smallest eigenvalue"), "{err}");
    }

    #[test]
    fn unconditional_marginal() {
        let p = TokenProcess::new(TokenProcessSpec::default()).unwrap();
        let c = p.conditional(&[], &[3, 7]).unwrap();
        assert_eq!(c.mean(), &DMatrix::zeros(2, 4));
        assert_eq!(c.covariance()[(0, 1)], p.covariance()[(3, 7)]);
        assert_eq!(c.covariance()[(1, 1)], p.covariance()[(7, 7)]);
    }

    #[test]
    fn degenerate_pair_copies_observation() {
        let spec = TokenProcessSpec {
            grid_height: 2,
            grid_width: 1,
            token_dim: 2,
            length_scale: 1e6,
            jitter: 1e-10,
            ..Default::default()
        };
        let p = TokenProcess::new(spec).unwrap();
        let c = p.conditional(&[(0, vec![0.7, -1.3])], &[1]).unwrap();
        assert!((c.mean()[(0, 0)] - 0.7).abs() < 1e-6);
        assert!((c.mean()[(0, 1)] + 1.3).abs() < 1e-6);
        assert!(c.covariance()[(0, 0)] < 1e-6);
    }

    #[test]
    fn conditioning_rejects_bad_positions() {
        let p = TokenProcess::new(TokenProcessSpec::default()).unwrap();
        assert!(p.conditional(&[(1, vec![0.0; 4])], &[1]).is_err());
        assert!(p.conditional(&[], &[16]).is_err());
        assert!(p.conditional(&[(2, vec![0.0; 3])], &[1]).is_err());
        assert!(p.conditional(&[], &[]).is_err());
    }

    #[test]
    fn mean_field_shifts_conditional() {
        let mf: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64; 4]).collect();
        let spec = TokenProcessSpec { mean_field: Some(mf), ..Default::default() };
        let p = TokenProcess::new(spec).unwrap();
        let c = p.conditional(&[(0, vec![0.0; 4])], &[5]).unwrap();
        // observing the mean leaves the target at its own mean
        assert!((c.mean()[(0, 0)] - 5.0).abs() < 1e-9);
        let bad = TokenProcessSpec { mean_field: Some(vec![vec![0.0; 4]; 3]), ..Default::default() };
        assert!(TokenProcess::new(bad).is_err());
    }

    #[test]
    fn orders() {
        assert_eq!(GenerationOrder::equal_groups(16, 5).unwrap(), vec![4, 3, 3, 3, 3]);
        let o = GenerationOrder::raster(16, 4).unwrap();
        assert_eq!(o.split_at_step(1), (&[0, 1, 2, 3][..], &[4, 5, 6, 7][..]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = GenerationOrder::random(16, 16, &mut rng).unwrap();
        let mut sorted = o.permutation().to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        assert!(GenerationOrder::new(vec![0, 0], vec![2]).is_err());
        assert!(GenerationOrder::new(vec![0, 1], vec![1]).is_err());
        assert!(GenerationOrder::equal_groups(4, 5).is_err());
    }

    #[test]
    fn exact_draw_matches_covariance_roughly() {
        let p = TokenProcess::new(TokenProcessSpec::default()).unwrap();
        let c = p.conditional(&[], &[0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = c.sample(&mut rng);
            acc += &x * x.transpose();
        }
        acc /= (n * 4) as f64;
        assert!((acc - c.covariance()).abs().max() < 0.03);
    }
}
