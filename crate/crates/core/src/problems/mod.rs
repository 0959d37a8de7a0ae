//! Local cost functions and their gradient oracles.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub mod data;
mod softmax;

pub use data::{Dataset, PartitionMode};
pub use softmax::SoftmaxProblem;

/// The honest workers' local costs `f_n`, with `f = (1/N) Σ_n f_n`.
pub trait Problem: Send + Sync {
    fn n_workers(&self) -> usize;

    fn dim(&self) -> usize;

    /// `∇f_n(x; ξ)` for a fresh sample `ξ` drawn from `rng`.
    fn stochastic_grad(&self, worker: usize, x: &[f64], batch: usize, rng: &mut Stream) -> Result<Vec<f64>>;

    /// `∇f_n(x)`.
    fn local_grad(&self, worker: usize, x: &[f64]) -> Vec<f64>;

    /// `f(x)`.
    fn loss(&self, x: &[f64]) -> f64;

    /// `∇f(x)`.
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_workers();
        let mut acc = vec![0.0; self.dim()];
        for w in 0..n {
            for (a, g) in acc.iter_mut().zip(self.local_grad(w, x)) {
                *a += g;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }

    /// Classification accuracy of `x`, if the problem has labels.
    fn accuracy(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// `f_n(x) = ½‖x − z_n‖²`, with stochastic gradients perturbed by
/// `noise_std · N(0, I)`. Smoothness constant `L = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    targets: Vec<Vec<f64>>,
    noise_std: f64,
}

impl QuadraticProblem {
    pub const SMOOTHNESS: f64 = 1.0;

    pub fn new(targets: Vec<Vec<f64>>, noise_std: f64) -> Result<Self> {
        let d = targets.first().ok_or(Error::EmptyInput)?.len();
        if d == 0 {
            return Err(Error::InvalidParameter("targets must have positive dimension".into()));
        }
        if let Some(bad) = targets.iter().find(|z| z.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_std {noise_std} must be non-negative")));
        }
        Ok(Self { targets, noise_std })
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// `x* = (1/N) Σ_n z_n`.
    pub fn optimum(&self) -> Vec<f64> {
        let n = self.targets.len() as f64;
        (0..self.dim())
            .map(|k| self.targets.iter().map(|z| z[k]).sum::<f64>() / n)
            .collect()
    }

    /// `f* = f(x*)`.
    pub fn optimal_value(&self) -> f64 {
        self.loss(&self.optimum())
    }

    /// `δ²_in = D · noise_std²`.
    pub fn inner_variation(&self) -> f64 {
        self.dim() as f64 * self.noise_std * self.noise_std
    }

    /// `δ²_out = max_n ‖z̄ − z_n‖²`.
    pub fn outer_variation(&self) -> f64 {
        let mean = self.optimum();
        self.targets
            .iter()
            .map(|z| z.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

impl Problem for QuadraticProblem {
    fn n_workers(&self) -> usize {
        self.targets.len()
    }

    fn dim(&self) -> usize {
        self.targets[0].len()
    }

    fn stochastic_grad(&self, worker: usize, x: &[f64], _batch: usize, rng: &mut Stream) -> Result<Vec<f64>> {
        let mut g = self.local_grad(worker, x);
        if self.noise_std > 0.0 {
            for v in &mut g {
                let e: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * e;
            }
        }
        Ok(g)
    }

    fn local_grad(&self, worker: usize, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.targets[worker]).map(|(a, z)| a - z).collect()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let n = self.targets.len() as f64;
        self.targets
            .iter()
            .map(|z| 0.5 * x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / n
    }
}

/// Empirical inner and outer variation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationEstimate {
    pub delta_in_sq: f64,
    pub delta_out_sq: f64,
}

/// Estimates `δ²_in` (max over probes and workers of the mean squared
/// deviation of stochastic gradients) and `δ²_out` (max over probes and
/// workers of `‖∇f_n(x) − ∇f(x)‖²`).
pub fn estimate_variations(
    problem: &dyn Problem,
    probes: &[Vec<f64>],
    samples: usize,
    batch: usize,
    rng: &mut Stream,
) -> Result<VariationEstimate> {
    if probes.is_empty() || samples == 0 {
        return Err(Error::EmptyInput);
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut est = VariationEstimate {
        delta_in_sq: 0.0,
        delta_out_sq: 0.0,
    };
    for x in probes {
        if x.len() != problem.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.dim(),
                found: x.len(),
            });
        }
        let global = problem.grad(x);
        for n in 0..problem.n_workers() {
            let local = problem.local_grad(n, x);
            est.delta_out_sq = est.delta_out_sq.max(sq(&local, &global));
            let mut total = 0.0;
            for _ in 0..samples {
                total += sq(&problem.stochastic_grad(n, x, batch, rng)?, &local);
            }
            est.delta_in_sq = est.delta_in_sq.max(total / samples as f64);
        }
    }
    Ok(est)
}
