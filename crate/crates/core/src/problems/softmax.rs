use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::data::Dataset;
use super::Problem;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Multinomial logistic regression with squared ℓ2 regularization.
///
/// The model is a `C × (F + 1)` row-major matrix: row `c` holds the `F`
/// feature weights of class `c` followed by its bias. Worker `n` owns the
/// samples indexed by `shards[n]` and
/// `f_n(x) = mean cross-entropy over its shard + (l2 / 2)‖x‖²`.
#[derive(Clone, Debug)]
pub struct SoftmaxProblem {
    train: Arc<Dataset>,
    shards: Vec<Vec<usize>>,
    test: Option<Arc<Dataset>>,
    l2: f64,
}

impl SoftmaxProblem {
    pub const DEFAULT_L2: f64 = 0.01;

    pub fn new(train: Arc<Dataset>, shards: Vec<Vec<usize>>, test: Option<Arc<Dataset>>, l2: f64) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(n) = shards.iter().position(Vec::is_empty) {
            return Err(Error::InvalidParameter(format!("worker {n} has an empty shard")));
        }
        if let Some(&bad) = shards.iter().flatten().find(|&&i| i >= train.len()) {
            return Err(Error::InvalidParameter(format!("sample index {bad} out of range")));
        }
        if let Some(t) = &test {
            if t.n_features() != train.n_features() || t.n_classes() != train.n_classes() {
                return Err(Error::InvalidParameter("test set shape differs from training set".into()));
            }
        }
        if !(l2 >= 0.0) {
            return Err(Error::InvalidParameter(format!("l2 coefficient {l2} must be non-negative")));
        }
        Ok(Self { train, shards, test, l2 })
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes()
    }

    pub fn shard(&self, worker: usize) -> &[usize] {
        &self.shards[worker]
    }

    fn row_len(&self) -> usize {
        self.train.n_features() + 1
    }

    fn logits(&self, x: &[f64], sample: &[f32], out: &mut [f64]) {
        let r = self.row_len();
        for (c, o) in out.iter_mut().enumerate() {
            let w = &x[c * r..(c + 1) * r];
            *o = w[r - 1] + w[..r - 1].iter().zip(sample).map(|(a, &s)| a * s as f64).sum::<f64>();
        }
    }

    /// Turns logits into probabilities in place and returns `log Σ exp`.
    fn softmax(z: &mut [f64]) -> f64 {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        z.iter_mut().for_each(|v| *v /= total);
        max + total.ln()
    }

    fn accumulate_grad(&self, x: &[f64], data: &Dataset, idx: impl Iterator<Item = usize>, g: &mut [f64]) -> usize {
        let r = self.row_len();
        let mut p = vec![0.0; self.n_classes()];
        let mut count = 0;
        for i in idx {
            let s = data.sample(i);
            self.logits(x, s, &mut p);
            Self::softmax(&mut p);
            p[data.label(i)] -= 1.0;
            for (c, &err) in p.iter().enumerate() {
                let row = &mut g[c * r..(c + 1) * r];
                for (gw, &f) in row[..r - 1].iter_mut().zip(s) {
                    *gw += err * f as f64;
                }
                row[r - 1] += err;
            }
            count += 1;
        }
        count
    }

    fn finish_grad(&self, x: &[f64], mut g: Vec<f64>, count: usize) -> Vec<f64> {
        let inv = 1.0 / count as f64;
        for (gv, xv) in g.iter_mut().zip(x) {
            *gv = *gv * inv + self.l2 * xv;
        }
        g
    }

    fn local_loss(&self, worker: usize, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.n_classes()];
        let shard = &self.shards[worker];
        let ce: f64 = shard
            .iter()
            .map(|&i| {
                self.logits(x, self.train.sample(i), &mut z);
                let label_logit = z[self.train.label(i)];
                Self::softmax(&mut z) - label_logit
            })
            .sum();
        ce / shard.len() as f64 + 0.5 * self.l2 * x.iter().map(|v| v * v).sum::<f64>()
    }

    /// Predicted class of one sample; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64], sample: &[f32]) -> usize {
        let mut z = vec![0.0; self.n_classes()];
        self.logits(x, sample, &mut z);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }
}

impl Problem for SoftmaxProblem {
    fn n_workers(&self) -> usize {
        self.shards.len()
    }

    fn dim(&self) -> usize {
        self.n_classes() * self.row_len()
    }

    fn stochastic_grad(&self, worker: usize, x: &[f64], batch: usize, rng: &mut Stream) -> Result<Vec<f64>> {
        if batch == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        let shard = &self.shards[worker];
        let picks = (0..batch).map(|_| shard[rng.random_range(0..shard.len())]);
        let mut g = vec![0.0; self.dim()];
        let count = self.accumulate_grad(x, &self.train, picks, &mut g);
        Ok(self.finish_grad(x, g, count))
    }

    fn local_grad(&self, worker: usize, x: &[f64]) -> Vec<f64> {
        let shard = &self.shards[worker];
        let mut g = vec![0.0; self.dim()];
        let count = self.accumulate_grad(x, &self.train, shard.iter().copied(), &mut g);
        self.finish_grad(x, g, count)
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let parts: Vec<f64> = (0..self.n_workers())
            .into_par_iter()
            .map(|n| self.local_loss(n, x))
            .collect();
        parts.iter().sum::<f64>() / parts.len() as f64
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = (0..self.n_workers())
            .into_par_iter()
            .map(|n| self.local_grad(n, x))
            .collect();
        let mut acc = vec![0.0; self.dim()];
        for p in &parts {
            for (a, g) in acc.iter_mut().zip(p) {
                *a += g;
            }
        }
        acc.iter_mut().for_each(|a| *a /= parts.len() as f64);
        acc
    }

    /// Accuracy on the test set, or on the pooled training shards if no test
    /// set was given.
    fn accuracy(&self, x: &[f64]) -> Option<f64> {
        let (data, idx): (&Dataset, Vec<usize>) = match &self.test {
            Some(t) => (t, (0..t.len()).collect()),
            None => (&self.train, self.shards.iter().flatten().copied().collect()),
        };
        let correct = idx
            .par_iter()
            .filter(|&&i| self.predict(x, data.sample(i)) == data.label(i))
            .count();
        Some(correct as f64 / idx.len() as f64)
    }
}
