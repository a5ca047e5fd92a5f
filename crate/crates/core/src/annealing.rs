//! Diffusion-step annealing: how many denoising steps each AR step gets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Constant,
    TwoStage,
    Linear,
    Cosine,
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Constant => "constant",
            SchedulerKind::TwoStage => "two_stage",
            SchedulerKind::Linear => "linear",
            SchedulerKind::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SchedulerKind::Constant),
            "two_stage" | "two-stage" => Ok(SchedulerKind::TwoStage),
            "linear" => Ok(SchedulerKind::Linear),
            "cosine" => Ok(SchedulerKind::Cosine),
            other => Err(Error::param("kind", format!("unknown scheduler kind `{other}`"))),
        }
    }
}

/// Maps AR step `k` in `[0, ar_steps)` to a diffusion step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepScheduler {
    pub kind: SchedulerKind,
    pub t_early: usize,
    pub t_late: usize,
    pub ar_steps: usize,
    #[serde(default = "default_min_steps")]
    pub min_steps: usize,
}

fn default_min_steps() -> usize {
    1
}

impl StepScheduler {
    pub fn new(kind: SchedulerKind, t_early: usize, t_late: usize, ar_steps: usize) -> Result<Self> {
        let s = Self { kind, t_early, t_late, ar_steps, min_steps: 1 };
        s.validate()?;
        Ok(s)
    }

    /// Every AR step uses `steps`; the baseline without annealing.
    pub fn constant(steps: usize, ar_steps: usize) -> Result<Self> {
        Self::new(SchedulerKind::Constant, steps, steps, ar_steps)
    }

    pub fn with_min_steps(mut self, min_steps: usize) -> Result<Self> {
        self.min_steps = min_steps;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_early == 0 {
            return Err(Error::param("t_early", "must be positive"));
        }
        if self.t_late == 0 {
            return Err(Error::param("t_late", "must be positive"));
        }
        if self.ar_steps == 0 {
            return Err(Error::param("ar_steps", "must be positive"));
        }
        if self.min_steps == 0 {
            return Err(Error::param("min_steps", "must be positive"));
        }
        Ok(())
    }

    /// Short label such as `linear_50_5`.
    pub fn label(&self) -> String {
        match self.kind {
            SchedulerKind::Constant => format!("constant_{}", self.t_early),
            kind => format!("{}_{}_{}", kind.name(), self.t_early, self.t_late),
        }
    }

    pub fn steps_at(&self, k: usize) -> Result<usize> {
        if k >= self.ar_steps {
            return Err(Error::param("k", format!("AR step {k} is outside [0, {})", self.ar_steps)));
        }
        let early = self.t_early as f64;
        let late = self.t_late as f64;
        let frac = k as f64 / self.ar_steps as f64;
        let raw = match self.kind {
            SchedulerKind::Constant => early,
            SchedulerKind::TwoStage => {
                if (k as f64) < self.ar_steps as f64 / 2.0 {
                    early
                } else {
                    late
                }
            }
            SchedulerKind::Linear => early + (late - early) * frac,
            SchedulerKind::Cosine => late + (early - late) * 0.5 * ((frac * std::f64::consts::PI).cos() + 1.0),
        };
        // f64::round rounds half away from zero.
        Ok((raw.round() as usize).max(self.min_steps))
    }

    pub fn schedule_table(&self) -> Vec<(usize, usize)> {
        (0..self.ar_steps).map(|k| (k, self.steps_at(k).expect("k in range"))).collect()
    }

    /// Total denoiser calls for one sequence: `sum_k T(k) * calls_per_step + K * surcharge_per_ar_step`.
    pub fn total_nfe(&self, calls_per_step: usize, surcharge_per_ar_step: usize) -> usize {
        self.schedule_table().iter().map(|(_, t)| t * calls_per_step).sum::<usize>()
            + self.ar_steps * surcharge_per_ar_step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(kind: SchedulerKind, e: usize, l: usize, k: usize) -> StepScheduler {
        StepScheduler::new(kind, e, l, k).unwrap()
    }

    #[test]
    fn linear_boundary_and_midpoint() {
        let s = sched(SchedulerKind::Linear, 50, 5, 64);
        assert_eq!(s.steps_at(0).unwrap(), 50);
        // 50 - 45 * 0.5 = 27.5 rounds away from zero
        assert_eq!(s.steps_at(32).unwrap(), 28);
    }

    #[test]
    fn two_stage_switches_at_half() {
        let s = sched(SchedulerKind::TwoStage, 50, 5, 64);
        assert_eq!(s.steps_at(31).unwrap(), 50);
        assert_eq!(s.steps_at(32).unwrap(), 5);
        // odd K: k < 2.5 means k in {0, 1, 2}
        let s = sched(SchedulerKind::TwoStage, 50, 5, 5);
        let t: Vec<_> = s.schedule_table().into_iter().map(|(_, t)| t).collect();
        assert_eq!(t, vec![50, 50, 50, 5, 5]);
    }

    #[test]
    fn cosine_boundary_and_midpoint() {
        let s = sched(SchedulerKind::Cosine, 50, 5, 64);
        assert_eq!(s.steps_at(0).unwrap(), 50);
        assert_eq!(s.steps_at(32).unwrap(), 28);
    }

    #[test]
    fn tables() {
        let s = StepScheduler::constant(50, 4).unwrap();
        assert_eq!(s.schedule_table(), vec![(0, 50), (1, 50), (2, 50), (3, 50)]);
        let s = sched(SchedulerKind::Linear, 25, 5, 32);
        let t = s.schedule_table();
        assert_eq!(t[0], (0, 25));
        assert_eq!(t[31], (31, 6));
    }

    #[test]
    fn nfe_totals() {
        assert_eq!(StepScheduler::constant(50, 64).unwrap().total_nfe(1, 0), 3200);
        assert_eq!(sched(SchedulerKind::TwoStage, 50, 5, 64).total_nfe(1, 0), 1760);
        assert_eq!(StepScheduler::constant(10, 4).unwrap().total_nfe(2, 1), 84);
    }

    #[test]
    fn min_steps_clamp() {
        let s = sched(SchedulerKind::Linear, 1, 1, 4).with_min_steps(3).unwrap();
        assert!(s.schedule_table().iter().all(|&(_, t)| t == 3));
    }

    #[test]
    fn out_of_range_k() {
        let s = sched(SchedulerKind::Linear, 50, 5, 8);
        assert!(s.steps_at(8).is_err());
        assert!(StepScheduler::new(SchedulerKind::Linear, 0, 5, 8).is_err());
        assert!(StepScheduler::new(SchedulerKind::Linear, 5, 5, 0).is_err());
    }

    #[test]
    fn labels_and_parsing() {
        assert_eq!(sched(SchedulerKind::Linear, 50, 5, 8).label(), "linear_50_5");
        assert_eq!(StepScheduler::constant(50, 8).unwrap().label(), "constant_50");
        assert_eq!("two-stage".parse::<SchedulerKind>().unwrap(), SchedulerKind::TwoStage);
        assert!("bogus".parse::<SchedulerKind>().is_err());
    }
}
