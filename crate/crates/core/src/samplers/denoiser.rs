use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::process::{exact_eps, exact_score, exact_velocity, ConditionalGaussian};
use crate::schedule::NoiseLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Epsilon,
    Score,
    Velocity,
}

/// One denoiser output in its native parameterization.
///
/// For `x = a x0 + b eps` (a = signal, b = noise) the three forms are tied by
/// `score = -eps / b` and `velocity = eps - x0`. The velocity is the flow drift
/// of the normalized path `x / (a + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: Parameterization,
    pub value: DMatrix<f64>,
}

impl Prediction {
    pub fn new(kind: Parameterization, value: DMatrix<f64>) -> Self {
        Self { kind, value }
    }

    pub fn epsilon(&self, x: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        match self.kind {
            Parameterization::Epsilon => self.value.clone(),
            Parameterization::Score => &self.value * -level.noise,
            Parameterization::Velocity => {
                let x0 = (x - &self.value * level.noise) / (level.signal + level.noise);
                &self.value + x0
            }
        }
    }

    pub fn x0(&self, x: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        match self.kind {
            Parameterization::Velocity => (x - &self.value * level.noise) / (level.signal + level.noise),
            _ => (x - self.epsilon(x, level) * level.noise) / level.signal,
        }
    }

    pub fn score(&self, x: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        match self.kind {
            Parameterization::Score => self.value.clone(),
            _ => self.epsilon(x, level) / -level.noise,
        }
    }

    pub fn velocity(&self, x: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        match self.kind {
            Parameterization::Velocity => self.value.clone(),
            _ => {
                let eps = self.epsilon(x, level);
                let x0 = (x - &eps * level.noise) / level.signal;
                eps - x0
            }
        }
    }

    pub fn convert(&self, to: Parameterization, x: &DMatrix<f64>, level: NoiseLevel) -> Prediction {
        let value = match to {
            Parameterization::Epsilon => self.epsilon(x, level),
            Parameterization::Score => self.score(x, level),
            Parameterization::Velocity => self.velocity(x, level),
        };
        Prediction::new(to, value)
    }
}

/// Anything that denoises `x` at a given noise level.
pub trait Denoiser: Sync {
    fn parameterization(&self) -> Parameterization;

    fn predict(&self, x: &DMatrix<f64>, level: NoiseLevel) -> Result<Prediction>;
}

/// The Bayes-optimal denoiser of a known Gaussian conditional.
#[derive(Debug, Clone, Copy)]
pub struct ExactOracle<'a> {
    cond: &'a ConditionalGaussian,
    native: Parameterization,
}

impl<'a> ExactOracle<'a> {
    pub fn new(cond: &'a ConditionalGaussian, native: Parameterization) -> Self {
        Self { cond, native }
    }

    pub fn conditional(&self) -> &ConditionalGaussian {
        self.cond
    }
}

impl Denoiser for ExactOracle<'_> {
    fn parameterization(&self) -> Parameterization {
        self.native
    }

    fn predict(&self, x: &DMatrix<f64>, level: NoiseLevel) -> Result<Prediction> {
        let (a, b) = (level.signal, level.noise);
        let value = match self.native {
            Parameterization::Epsilon | Parameterization::Score => {
                // rescale onto the variance-preserving path
                let c = (a * a + b * b).sqrt();
                let alpha_bar = (a / c).powi(2);
                let xs = if c == 1.0 { x.clone() } else { x / c };
                if self.native == Parameterization::Epsilon {
                    exact_eps(self.cond, &xs, alpha_bar)?
                } else {
                    exact_score(self.cond, &xs, alpha_bar)? / c
                }
            }
            Parameterization::Velocity => {
                let c = a + b;
                let xs = if c == 1.0 { x.clone() } else { x / c };
                exact_velocity(self.cond, &xs, b / c)?
            }
        };
        Ok(Prediction::new(self.native, value))
    }
}
