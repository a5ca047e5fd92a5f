use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::{gaussian_fit, tags, w2_gaussian};
use crate::annealing::{SchedulerKind, StepScheduler};
use crate::error::{Error, Result};
use crate::process::{Generator, TokenSequence};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheduler: String,
    pub kind: SchedulerKind,
    pub t_early: usize,
    pub t_late: usize,
    pub ar_step: usize,
    /// Denoiser calls for one whole sequence under this scheduler.
    pub nfe: usize,
    pub w2: f64,
    pub w2_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub scheduler: String,
    pub kind: SchedulerKind,
    pub t_early: usize,
    pub t_late: usize,
    pub nfe: usize,
    /// Mean of the per-step W2 over AR steps.
    pub aggregate_w2: f64,
    pub aggregate_floor: f64,
    pub step0_w2: f64,
    /// `||C_hat - Sigma||_F / ||Sigma||_F` for the empirical joint covariance of whole sequences.
    pub joint_moment_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub sequences: usize,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<SweepSummary>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "scheduler,kind,t_early,t_late,ar_step,nfe,w2,w2_floor";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.scheduler,
                r.kind.name(),
                r.t_early,
                r.t_late,
                r.ar_step,
                r.nfe,
                r.w2,
                r.w2_floor
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("scheduler,kind,t_early,t_late,nfe,aggregate_w2,aggregate_floor,step0_w2,joint_moment_error\n");
        for r in &self.summaries {
            s += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.scheduler,
                r.kind.name(),
                r.t_early,
                r.t_late,
                r.nfe,
                r.aggregate_w2,
                r.aggregate_floor,
                r.step0_w2,
                r.joint_moment_error
            );
        }
        s
    }

    pub fn summary(&self, label: &str) -> Option<&SweepSummary> {
        self.summaries.iter().find(|s| s.scheduler == label)
    }
}

/// Per-token W2 between a Gaussian fit of pooled residual columns and `N(0, cov)`.
fn residual_w2(residuals: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let (mean, fit) = gaussian_fit(residuals)?;
    let m = cov.nrows();
    Ok(w2_gaussian(&mean, &fit, &DVector::zeros(m), cov)? / (m as f64).sqrt())
}

/// Step-`k` W2 of one scheduler's sequences and the Monte Carlo floor at the same sample size.
///
/// Residuals `x - E[x | prefix]` are pooled over sequences and channels. Their
/// law is a zero-mean mixture over prefixes whose covariance is the average
/// conditional covariance, which is the reference Gaussian. The floor replaces
/// each sampled residual by an exact draw from its own conditional.
fn step_w2(seqs: &[TokenSequence], k: usize, seed: u64) -> Result<(f64, f64)> {
    let m = seqs[0].steps[k].positions.len();
    let d = seqs[0].values.ncols();
    let mut residuals = DMatrix::zeros(m, seqs.len() * d);
    let mut exact = DMatrix::zeros(m, seqs.len() * d);
    let mut cov = DMatrix::zeros(m, m);
    for (i, seq) in seqs.iter().enumerate() {
        let st = &seq.steps[k];
        let x = seq.values.select_rows(&st.positions);
        residuals.columns_mut(i * d, d).copy_from(&(x - st.conditional.mean()));
        let mut r = rng::diagnostic_stream(seed, tags::SWEEP_FLOOR, i as u64, k as u64);
        exact.columns_mut(i * d, d).copy_from(&st.conditional.noise_like(&mut r));
        cov += st.conditional.covariance();
    }
    cov /= seqs.len() as f64;
    Ok((residual_w2(&residuals, &cov)?, residual_w2(&exact, &cov)?))
}

fn joint_moment_error(gen: &Generator, seqs: &[TokenSequence]) -> f64 {
    let n = gen.process.token_count();
    let d = gen.process.token_dim();
    let mut acc = DMatrix::zeros(n, n);
    for seq in seqs {
        let dev = &seq.values - gen.process.mean();
        acc += &dev * dev.transpose();
    }
    acc /= (seqs.len() * d) as f64;
    let sigma = gen.process.covariance();
    (acc - sigma).norm() / sigma.norm()
}

/// Runs `sequences` sequences per scheduler and scores each AR step against the exact conditionals.
///
/// Every scheduler reuses the same sequence indices, hence the same orders and
/// noise streams, so differences between rows come from the step counts.
pub fn quality_sweep(gen: &Generator, schedulers: &[StepScheduler], sequences: usize) -> Result<SweepReport> {
    if schedulers.is_empty() {
        return Err(Error::param("schedulers", "must not be empty"));
    }
    if sequences < 2 {
        return Err(Error::param("sequences", "must be at least 2"));
    }
    let k_total = schedulers[0].ar_steps;
    if schedulers.iter().any(|s| s.ar_steps != k_total) {
        return Err(Error::param("schedulers", "all schedulers must share the same number of AR steps"));
    }
    let calls = gen.sampler.calls_per_step();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for sched in schedulers {
        let seqs: Vec<TokenSequence> =
            (0..sequences as u64).into_par_iter().map(|i| gen.generate(sched, i, false)).collect::<Result<_>>()?;
        let per_step: Vec<(f64, f64)> =
            (0..k_total).into_par_iter().map(|k| step_w2(&seqs, k, gen.seed)).collect::<Result<_>>()?;
        let nfe = sched.total_nfe(calls, 0);
        let label = sched.label();
        for (k, &(w2, w2_floor)) in per_step.iter().enumerate() {
            rows.push(SweepRow {
                scheduler: label.clone(),
                kind: sched.kind,
                t_early: sched.t_early,
                t_late: sched.t_late,
                ar_step: k,
                nfe,
                w2,
                w2_floor,
            });
        }
        let kf = k_total as f64;
        summaries.push(SweepSummary {
            scheduler: label,
            kind: sched.kind,
            t_early: sched.t_early,
            t_late: sched.t_late,
            nfe,
            aggregate_w2: per_step.iter().map(|p| p.0).sum::<f64>() / kf,
            aggregate_floor: per_step.iter().map(|p| p.1).sum::<f64>() / kf,
            step0_w2: per_step[0].0,
            joint_moment_error: joint_moment_error(gen, &seqs),
        });
    }
    Ok(SweepReport { sequences, rows, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{OrderPolicy, SamplingDomain, TokenProcess, TokenProcessSpec};
    use crate::samplers::SamplerConfig;
    use crate::schedule::DiffusionSchedule;

    #[test]
    fn shape_and_nfe_columns() {
        let p = TokenProcess::new(TokenProcessSpec { grid_height: 2, grid_width: 2, token_dim: 2, ..Default::default() })
            .unwrap();
        let dom = SamplingDomain::Diffusion { schedule: DiffusionSchedule::cosine(1000, 0.008).unwrap(), start_index: 999 };
        let gen = Generator { process: &p, policy: OrderPolicy::Random, sampler: SamplerConfig::ddim(0.0), domain: &dom, seed: 1, order_seed: 1 };
        let scheds = [
            StepScheduler::new(SchedulerKind::Linear, 20, 2, 4).unwrap(),
            StepScheduler::new(SchedulerKind::Linear, 20, 10, 4).unwrap(),
        ];
        let rep = quality_sweep(&gen, &scheds, 50).unwrap();
        assert_eq!(rep.rows.len(), 8);
        assert!(rep.summaries[0].nfe < rep.summaries[1].nfe);
        assert!(rep.rows.iter().all(|r| r.w2 >= 0.0 && r.w2_floor >= 0.0));
        assert_eq!(rep.to_csv().lines().next().unwrap(), SweepReport::CSV_HEADER);
        let bad = [scheds[0], StepScheduler::constant(5, 2).unwrap()];
        assert!(quality_sweep(&gen, &bad, 50).is_err());
    }
}
