use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ConditionalGaussian, GenerationOrder, OrderPolicy, TokenProcess};
use crate::annealing::StepScheduler;
use crate::error::{Error, Result};
use crate::rng;
use crate::samplers::{self, ExactOracle, SamplerConfig, TrajectoryRecord};
use crate::schedule::{make_diffusion_grid, make_flow_grid, DiffusionSchedule, Domain, NoisePath};

/// Where the per-token reverse process starts and how its grids are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum SamplingDomain {
    Diffusion { schedule: DiffusionSchedule, start_index: usize },
    Flow { start_time: f64 },
}

impl SamplingDomain {
    pub fn domain(&self) -> Domain {
        match self {
            SamplingDomain::Diffusion { .. } => Domain::DiscreteDiffusion,
            SamplingDomain::Flow { .. } => Domain::ContinuousFlow,
        }
    }

    pub fn path(&self, num_steps: usize) -> Result<NoisePath> {
        match self {
            SamplingDomain::Diffusion { schedule, start_index } => {
                make_diffusion_grid(schedule, num_steps, *start_index)?.resolve(Some(schedule))
            }
            SamplingDomain::Flow { start_time } => make_flow_grid(num_steps, *start_time)?.resolve(None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub ar_step: usize,
    pub positions: Vec<usize>,
    pub diffusion_steps: usize,
    pub nfe: usize,
    pub trajectory: TrajectoryRecord,
    pub conditional: ConditionalGaussian,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `n x d`, row `p` holds the token at grid position `p`.
    pub values: DMatrix<f64>,
    pub order: GenerationOrder,
    pub steps: Vec<StepRecord>,
}

impl TokenSequence {
    pub fn total_nfe(&self) -> usize {
        self.steps.iter().map(|s| s.nfe).sum()
    }

    /// Rows `seq_id,ar_step,position,dim,value`, in generation order.
    pub fn write_csv_rows<W: Write>(&self, seq_id: usize, out: &mut W) -> std::io::Result<()> {
        for step in &self.steps {
            for &p in &step.positions {
                for (dim, v) in self.values.row(p).iter().enumerate() {
                    writeln!(out, "{seq_id},{},{p},{dim},{v}", step.ar_step)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self, seq_id: usize, include_paths: bool) -> serde_json::Value {
        let values: Vec<Vec<f64>> =
            (0..self.values.nrows()).map(|i| self.values.row(i).iter().copied().collect()).collect();
        let steps: Vec<_> = self
            .steps
            .iter()
            .map(|s| {
                serde_json::json!({
                    "ar_step": s.ar_step,
                    "positions": s.positions,
                    "diffusion_steps": s.diffusion_steps,
                    "nfe": s.nfe,
                    "trajectory": s.trajectory.to_json(include_paths),
                })
            })
            .collect();
        serde_json::json!({
            "seq_id": seq_id,
            "permutation": self.order.permutation(),
            "group_sizes": self.order.group_sizes(),
            "values": values,
            "total_nfe": self.total_nfe(),
            "steps": steps,
        })
    }
}

/// Runs the full autoregressive loop for one sequence.
///
/// AR step `k` conditions on every token already committed, samples its group
/// with `scheduler.steps_at(k)` sampler steps against the exact oracle, and
/// commits the result. Randomness comes from the `(seed, seq_index, k)` stream
/// only, so sequences can be generated in any order or in parallel.
#[allow(clippy::too_many_arguments)]
pub fn generate_sequence(
    process: &TokenProcess,
    order: &GenerationOrder,
    sampler: &SamplerConfig,
    scheduler: &StepScheduler,
    domain: &SamplingDomain,
    seed: u64,
    seq_index: u64,
    record_paths: bool,
) -> Result<TokenSequence> {
    sampler.validate()?;
    scheduler.validate()?;
    if sampler.domain() != domain.domain() {
        return Err(Error::DomainMismatch(format!(
            "sampler {} needs a {:?} schedule, got {:?}",
            sampler.kind.name(),
            sampler.domain(),
            domain.domain()
        )));
    }
    if order.permutation().len() != process.token_count() {
        return Err(Error::param("order", format!("expected a permutation of {} positions", process.token_count())));
    }
    if order.ar_steps() != scheduler.ar_steps {
        return Err(Error::param(
            "ar_steps",
            format!("scheduler has K = {} but the order has {} groups", scheduler.ar_steps, order.ar_steps()),
        ));
    }

    let d = process.token_dim();
    let mut values = DMatrix::zeros(process.token_count(), d);
    let mut steps = Vec::with_capacity(order.ar_steps());
    let native = sampler.kind.native_parameterization();
    for k in 0..order.ar_steps() {
        let (observed, targets) = order.split_at_step(k);
        let mut run = || -> Result<StepRecord> {
            let cond = process.conditional_on(observed, &values.select_rows(observed), targets)?;
            let t = scheduler.steps_at(k)?;
            let path = domain.path(t)?;
            let oracle = ExactOracle::new(&cond, native);
            let mut r = rng::ar_step_stream(seed, seq_index, k);
            let (x, trajectory) = samplers::sample(sampler, &oracle, &path, (targets.len(), d), &mut r, record_paths)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("sampler produced a non-finite token".into()));
            }
            for (row, &p) in targets.iter().enumerate() {
                values.set_row(p, &x.row(row));
            }
            Ok(StepRecord {
                ar_step: k,
                positions: targets.to_vec(),
                diffusion_steps: t,
                nfe: trajectory.nfe,
                trajectory,
                conditional: cond,
            })
        };
        steps.push(run().map_err(|e| e.at_step(k))?);
    }
    Ok(TokenSequence { values, order: order.clone(), steps })
}

/// Everything needed to generate sequence `i` of an experiment except the scheduler.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub process: &'a TokenProcess,
    pub policy: OrderPolicy,
    pub sampler: SamplerConfig,
    pub domain: &'a SamplingDomain,
    pub seed: u64,
    /// Seed of the generation-order streams, usually equal to `seed`.
    pub order_seed: u64,
}

impl Generator<'_> {
    /// Generation order of sequence `seq_index`, drawn from its own order block.
    pub fn order(&self, seq_index: u64, ar_steps: usize) -> Result<GenerationOrder> {
        let mut r = rng::stream(self.order_seed, seq_index, rng::ORDER_BLOCK);
        GenerationOrder::from_policy(self.policy, self.process.token_count(), ar_steps, &mut r)
    }

    pub fn generate(&self, scheduler: &StepScheduler, seq_index: u64, record_paths: bool) -> Result<TokenSequence> {
        let order = self.order(seq_index, scheduler.ar_steps)?;
        generate_sequence(
            self.process,
            &order,
            &self.sampler,
            scheduler,
            self.domain,
            self.seed,
            seq_index,
            record_paths,
        )
    }
}
