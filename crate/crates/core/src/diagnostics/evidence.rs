use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{tags, trend};
use crate::annealing::StepScheduler;
use crate::error::{Error, Result};
use crate::process::Generator;
use crate::rng;
use crate::samplers::{self, ExactOracle};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    /// `[k][dim]` variance of repeated next-group draws, averaged over the group's tokens and references.
    pub per_step: Vec<Vec<f64>>,
    /// Exact per-dimension conditional variance (mean diagonal of the conditional covariance).
    pub exact: Vec<f64>,
    pub draws_per_step: usize,
    pub references: usize,
}

impl VarianceReport {
    /// Variance per AR step averaged over dimensions.
    pub fn mean_per_step(&self) -> Vec<f64> {
        self.per_step.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect()
    }

    pub fn trend(&self) -> f64 {
        trend(&self.mean_per_step())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ar_step,dim,variance,exact_variance\n");
        for (k, dims) in self.per_step.iter().enumerate() {
            for (j, v) in dims.iter().enumerate() {
                s += &format!("{k},{j},{v},{}\n", self.exact[k]);
            }
        }
        s
    }
}

/// Per-step spread of the sampler's next-group draws with the prefix frozen.
///
/// Each of `references` sequences is generated once; at every AR step its
/// group is then redrawn `draws_per_step` times from the same prefix.
pub fn sampling_variance(
    gen: &Generator,
    scheduler: &StepScheduler,
    draws_per_step: usize,
    references: usize,
) -> Result<VarianceReport> {
    if draws_per_step < 2 {
        return Err(Error::param("draws_per_step", "must be at least 2"));
    }
    if references == 0 {
        return Err(Error::param("references", "must be positive"));
    }
    let k_total = scheduler.ar_steps;
    let d = gen.process.token_dim();
    let native = gen.sampler.kind.native_parameterization();
    let per_ref: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..references as u64)
        .into_par_iter()
        .map(|r| {
            let reference = gen.generate(scheduler, r, false)?;
            let mut var = Vec::with_capacity(k_total);
            let mut exact = Vec::with_capacity(k_total);
            for st in &reference.steps {
                let k = st.ar_step;
                let m = st.positions.len();
                let path = gen.domain.path(st.diffusion_steps).map_err(|e| e.at_step(k))?;
                let oracle = ExactOracle::new(&st.conditional, native);
                let mut sum = DMatrix::zeros(m, d);
                let mut sum_sq = DMatrix::zeros(m, d);
                for j in 0..draws_per_step as u64 {
                    let cell = r * k_total as u64 + k as u64;
                    let mut g = rng::diagnostic_stream(gen.seed, tags::VARIANCE, cell, j);
                    let (x, _) = samplers::sample(&gen.sampler, &oracle, &path, (m, d), &mut g, false)
                        .map_err(|e| e.at_step(k))?;
                    sum += &x;
                    sum_sq += x.component_mul(&x);
                }
                let n = draws_per_step as f64;
                let unbiased = (sum_sq - sum.component_mul(&sum) / n) / (n - 1.0);
                var.push((0..d).map(|j| unbiased.column(j).sum().max(0.0) / m as f64).collect());
                exact.push(st.conditional.trace() / m as f64);
            }
            Ok((var, exact))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / references as f64;
    let mut per_step = vec![vec![0.0; d]; k_total];
    let mut exact = vec![0.0; k_total];
    for (var, ex) in &per_ref {
        for k in 0..k_total {
            for j in 0..d {
                per_step[k][j] += var[k][j] * scale;
            }
            exact[k] += ex[k] * scale;
        }
    }
    Ok(VarianceReport { per_step, exact, draws_per_step, references })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Mean over seeds of `||x - E[x | prefix]||_F^2 / token_dim`.
    pub mse: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Mean over seeds of `trace(conditional covariance)`, the expectation of `mse`.
    pub exact: Vec<f64>,
    pub seeds: usize,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ar_step,mse,std_error,exact_trace\n");
        for k in 0..self.mse.len() {
            s += &format!("{k},{},{},{}\n", self.mse[k], self.std_error[k], self.exact[k]);
        }
        s
    }
}

/// Error of the Bayes predictor (the conditional mean) against exact next-group draws.
///
/// Sequences follow the generator's orders but are drawn exactly from the
/// process, so the report isolates how constrained each AR step is.
pub fn probe_error(gen: &Generator, ar_steps: usize, seeds: usize) -> Result<ProbeReport> {
    if seeds < 2 {
        return Err(Error::param("seeds", "must be at least 2"));
    }
    let d = gen.process.token_dim();
    let per_seed: Vec<Vec<(f64, f64)>> = (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let order = gen.order(s, ar_steps)?;
            let mut values = DMatrix::zeros(gen.process.token_count(), d);
            let mut out = Vec::with_capacity(ar_steps);
            for k in 0..ar_steps {
                let (observed, targets) = order.split_at_step(k);
                let cond = gen
                    .process
                    .conditional_on(observed, &values.select_rows(observed), targets)
                    .map_err(|e| e.at_step(k))?;
                let mut r = rng::diagnostic_stream(gen.seed, tags::PROBE, s, k as u64);
                let x = cond.sample(&mut r);
                out.push(((&x - cond.mean()).norm_squared() / d as f64, cond.trace()));
                for (row, &p) in targets.iter().enumerate() {
                    values.set_row(p, &x.row(row));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let n = seeds as f64;
    let mut mse = vec![0.0; ar_steps];
    let mut std_error = vec![0.0; ar_steps];
    let mut exact = vec![0.0; ar_steps];
    for k in 0..ar_steps {
        let errs: Vec<f64> = per_seed.iter().map(|row| row[k].0).collect();
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        mse[k] = mean;
        std_error[k] = (var / n).sqrt();
        exact[k] = per_seed.iter().map(|row| row[k].1).sum::<f64>() / n;
    }
    Ok(ProbeReport { mse, std_error, exact, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annealing::StepScheduler;
    use crate::process::{OrderPolicy, SamplingDomain, TokenProcess, TokenProcessSpec};
    use crate::samplers::SamplerConfig;
    use crate::schedule::DiffusionSchedule;

    fn dirac_process() -> TokenProcess {
        TokenProcess::new(TokenProcessSpec {
            grid_height: 2,
            grid_width: 2,
            token_dim: 2,
            marginal_std: 0.0,
            jitter: 1e-20,
            ..Default::default()
        })
        .unwrap()
    }

    fn domain() -> SamplingDomain {
        SamplingDomain::Diffusion { schedule: DiffusionSchedule::cosine(1000, 0.008).unwrap(), start_index: 999 }
    }

    #[test]
    fn dirac_has_no_spread() {
        let p = dirac_process();
        let dom = domain();
        let gen = Generator { process: &p, policy: OrderPolicy::Random, sampler: SamplerConfig::ddim(0.0), domain: &dom, seed: 3, order_seed: 3 };
        let sched = StepScheduler::constant(20, 4).unwrap();
        let v = sampling_variance(&gen, &sched, 10, 2).unwrap();
        assert!(v.per_step.iter().flatten().all(|&x| x < 1e-12));
        assert_eq!(v.to_csv().lines().count(), 1 + 4 * 2);
        let probe = probe_error(&gen, 4, 10).unwrap();
        assert!(probe.mse.iter().all(|&x| x < 1e-12));
    }

    #[test]
    fn rejects_degenerate_counts() {
        let p = dirac_process();
        let dom = domain();
        let gen = Generator { process: &p, policy: OrderPolicy::Raster, sampler: SamplerConfig::ddim(0.0), domain: &dom, seed: 3, order_seed: 3 };
        let sched = StepScheduler::constant(5, 4).unwrap();
        assert!(sampling_variance(&gen, &sched, 1, 2).is_err());
        assert!(probe_error(&gen, 4, 1).is_err());
    }
}
