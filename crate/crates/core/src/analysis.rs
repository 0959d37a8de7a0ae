//! Empirical checks of the theory: contraction constants, the consensus
//! and convergence bounds, and the fixed point of non-doubly-stochastic
//! mixing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationInput, AggregatorSpec, Message, NeighborWeights, RoundInfo};
use crate::error::{Error, Result};
use crate::graph::{MixingMatrix, Topology};
use crate::rng::{stream, Purpose, Stream};
use crate::trainer::MetricsRecord;

/// Relative slack allowed when comparing a measured quantity to a bound.
pub const BOUND_SLACK: f64 = 1e-9;
/// Samples whose honest models all (nearly) coincide are skipped.
pub const MIN_SPREAD: f64 = 1e-12;
pub const PERRON_TOL: f64 = 1e-12;
pub const PERRON_MAX_ITER: usize = 100_000;

/// An aggregation rule whose contraction constant can be estimated.
pub trait ContractionRule: Sync {
    fn label(&self) -> String;

    fn apply(&self, input: &AggregationInput, round: RoundInfo) -> Result<Vec<f64>>;
}

impl ContractionRule for AggregatorSpec {
    fn label(&self) -> String {
        self.to_string()
    }

    fn apply(&self, input: &AggregationInput, round: RoundInfo) -> Result<Vec<f64>> {
        aggregate(self, input, round)
    }
}

/// The ideal rule `Σ_{m∈N_n∪{n}} w_nm x_m` for a given honest-only `W`.
/// It ignores Byzantine messages, so its contraction constant is zero.
#[derive(Clone, Debug)]
pub struct VirtualMeanRule {
    pub w: MixingMatrix,
}

impl ContractionRule for VirtualMeanRule {
    fn label(&self) -> String {
        "virtual-mean".into()
    }

    fn apply(&self, input: &AggregationInput, _round: RoundInfo) -> Result<Vec<f64>> {
        let n = input.own_id;
        let honest = self.w.size();
        let mut acc = vec![0.0; input.dim()];
        for (id, v) in input.closed_neighborhood() {
            if id >= honest {
                continue;
            }
            let w = self.w.get(n, id);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        }
        Ok(acc)
    }
}

/// Equal weights `1/(N_n + 1)` over each honest worker's honest closed
/// neighborhood, the virtual matrix used for median-type rules.
pub fn equal_weight_virtual(t: &Topology) -> MixingMatrix {
    let n = t.n_honest();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let hn = t.honest_neighbors(i);
        let v = 1.0 / (hn.len() + 1) as f64;
        w[i * n + i] = v;
        for m in hn {
            w[i * n + m] = v;
        }
    }
    MixingMatrix::new(n, w).expect("rows of equal weights sum to one")
}

/// `max_n 12·W′_n(U^max) / (1 − 3·W′_n(U^max))` with `|U^max| = B_n`, or
/// `None` when some worker has `W′_n(U^max) ≥ 1/3`.
pub fn ios_rho_bound(wprime: &MixingMatrix, t: &Topology) -> Option<f64> {
    let mut best: f64 = 0.0;
    for n in t.honest_ids() {
        let w = NeighborWeights::from_matrix(wprime, t, n).largest_neighbor_mass(n, t.byzantine_neighbors(n).len());
        if w >= 1.0 / 3.0 {
            return None;
        }
        best = best.max(12.0 * w / (1.0 - 3.0 * w));
    }
    Some(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    /// Byzantine messages scattered around `x̄_n` at a log-uniform scale in
    /// `[0.1, 10]` times the honest spread.
    Random,
    /// All Byzantine neighbors of `n` send `x̄_n ± 10⁶ · spread · u` for one
    /// random unit direction `u`.
    WorstScaled,
}

pub const WORST_SCALE: f64 = 1e6;

/// Where an estimate is taken: the graph, the weights the rule uses, and
/// the virtual matrix it is compared against.
#[derive(Clone, Copy, Debug)]
pub struct ContractionSetup<'a> {
    pub topology: &'a Topology,
    pub wprime: &'a MixingMatrix,
    pub w_virtual: &'a MixingMatrix,
}

/// Inputs and outcome of the sample that attained `rho_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub sample: usize,
    pub worker: usize,
    pub ratio: f64,
    pub own: Vec<f64>,
    pub messages: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub rule: String,
    pub adversary: Adversary,
    pub rho_hat: f64,
    pub sample_count: usize,
    /// (sample, worker) pairs skipped because the honest spread was `< 1e-12`.
    pub skipped: usize,
    pub theoretical_bound: Option<f64>,
    pub worst_case: Option<WorstCase>,
}

impl ContractionReport {
    /// Whether `rho_hat` stays within the theoretical bound (if any).
    pub fn within_bound(&self) -> bool {
        self.theoretical_bound
            .is_none_or(|b| self.rho_hat <= b * (1.0 + BOUND_SLACK))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn virtual_mean(w: &MixingMatrix, t: &Topology, n: usize, models: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; models[n].len()];
    for m in std::iter::once(n).chain(t.honest_neighbors(n)) {
        let wm = w.get(n, m);
        for (a, x) in acc.iter_mut().zip(&models[m]) {
            *a += wm * x;
        }
    }
    acc
}

/// `‖A_n − x̄_n‖ / max_{m∈N_n∪{n}} ‖x_m − x̄_n‖` for every honest worker,
/// with `x̄_n` taken from the virtual matrix. Byzantine messages are looked
/// up by `(sender, receiver)`. `None` marks workers whose honest spread is
/// below [`MIN_SPREAD`].
pub fn instance_ratios(
    rule: &dyn ContractionRule,
    setup: ContractionSetup,
    honest_models: &[Vec<f64>],
    byzantine: &BTreeMap<(usize, usize), Vec<f64>>,
) -> Result<Vec<Option<f64>>> {
    let t = setup.topology;
    (0..t.n_honest())
        .map(|n| {
            let xbar = virtual_mean(setup.w_virtual, t, n, honest_models);
            let spread = std::iter::once(n)
                .chain(t.honest_neighbors(n))
                .map(|m| dist(&honest_models[m], &xbar))
                .fold(0.0, f64::max);
            if spread < MIN_SPREAD {
                return Ok(None);
            }
            let byz = t.byzantine_neighbors(n);
            let mut messages: Vec<Message> = t
                .honest_neighbors(n)
                .into_iter()
                .map(|m| Message {
                    from: m,
                    value: &honest_models[m],
                })
                .collect();
            for &b in &byz {
                let value = byzantine
                    .get(&(b, n))
                    .ok_or_else(|| Error::InvalidParameter(format!("no message from {b} to {n}")))?;
                messages.push(Message { from: b, value });
            }
            let weights = NeighborWeights::from_matrix(setup.wprime, t, n);
            let input = AggregationInput::new(n, &honest_models[n], messages).with_weights(&weights);
            let round = RoundInfo {
                alpha: 1.0,
                byzantine_neighbors: byz.len(),
            };
            let out = rule.apply(&input, round)?;
            Ok(Some(dist(&out, &xbar) / spread))
        })
        .collect()
}

fn gaussian_vec(rng: &mut Stream, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut Stream, d: usize) -> Vec<f64> {
    loop {
        let g = gaussian_vec(rng, d);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Byzantine messages keyed by `(sender, receiver)`.
type Sent = BTreeMap<(usize, usize), Vec<f64>>;

fn draw_sample(
    setup: ContractionSetup,
    dim: usize,
    adversary: Adversary,
    rng: &mut Stream,
) -> (Vec<Vec<f64>>, Sent) {
    let t = setup.topology;
    let center = gaussian_vec(rng, dim);
    let models: Vec<Vec<f64>> = (0..t.n_honest())
        .map(|_| {
            let scale = 10f64.powf(rng.random_range(-1.0..1.0));
            gaussian_vec(rng, dim)
                .into_iter()
                .zip(&center)
                .map(|(g, c)| c + scale * g)
                .collect()
        })
        .collect();
    let mut byz = BTreeMap::new();
    for n in t.honest_ids() {
        let xbar = virtual_mean(setup.w_virtual, t, n, &models);
        let spread = std::iter::once(n)
            .chain(t.honest_neighbors(n))
            .map(|m| dist(&models[m], &xbar))
            .fold(0.0, f64::max);
        match adversary {
            Adversary::Random => {
                for b in t.byzantine_neighbors(n) {
                    let scale = spread * 10f64.powf(rng.random_range(-1.0..1.0));
                    let dir = unit_vec(rng, dim);
                    byz.insert((b, n), xbar.iter().zip(dir).map(|(x, u)| x + scale * u).collect());
                }
            }
            Adversary::WorstScaled => {
                let dir = unit_vec(rng, dim);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let msg: Vec<f64> = xbar
                    .iter()
                    .zip(&dir)
                    .map(|(x, u)| x + sign * WORST_SCALE * spread * u)
                    .collect();
                for b in t.byzantine_neighbors(n) {
                    byz.insert((b, n), msg.clone());
                }
            }
        }
    }
    (models, byz)
}

/// Monte-Carlo estimate of the contraction constant of `rule` against the
/// virtual matrix in `setup`: the largest observed ratio over all honest
/// workers and `n_samples` random instances.
pub fn estimate_contraction(
    rule: &dyn ContractionRule,
    setup: ContractionSetup,
    dim: usize,
    n_samples: usize,
    seed: u64,
    adversary: Adversary,
    theoretical_bound: Option<f64>,
) -> Result<ContractionReport> {
    let t = setup.topology;
    if setup.wprime.size() != t.size() || setup.w_virtual.size() != t.n_honest() {
        return Err(Error::InvalidParameter("matrix sizes do not match the topology".into()));
    }
    type Best = (usize, Option<WorstCase>);
    let per_sample: Vec<Result<Best>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(seed, Purpose::Contraction, &[s as u64, adversary as u64]);
            let (models, byz) = draw_sample(setup, dim, adversary, &mut rng);
            let ratios = instance_ratios(rule, setup, &models, &byz)?;
            let skipped = ratios.iter().filter(|r| r.is_none()).count();
            let mut worst: Option<WorstCase> = None;
            for (n, r) in ratios.iter().enumerate() {
                let Some(r) = *r else { continue };
                if worst.as_ref().is_none_or(|w| r > w.ratio) {
                    let mut messages: Vec<(usize, Vec<f64>)> =
                        t.honest_neighbors(n).into_iter().map(|m| (m, models[m].clone())).collect();
                    messages.extend(t.byzantine_neighbors(n).into_iter().map(|b| (b, byz[&(b, n)].clone())));
                    worst = Some(WorstCase {
                        sample: s,
                        worker: n,
                        ratio: r,
                        own: models[n].clone(),
                        messages,
                    });
                }
            }
            Ok((skipped, worst))
        })
        .collect();
    let mut skipped = 0;
    let mut worst: Option<WorstCase> = None;
    for res in per_sample {
        let (s, w) = res?;
        skipped += s;
        if let Some(w) = w {
            if worst.as_ref().is_none_or(|b| w.ratio > b.ratio) {
                worst = Some(w);
            }
        }
    }
    Ok(ContractionReport {
        rule: rule.label(),
        adversary,
        rho_hat: worst.as_ref().map_or(0.0, |w| w.ratio),
        sample_count: n_samples,
        skipped,
        theoretical_bound,
        worst_case: worst,
    })
}

/// A measured quantity against a theoretical bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// False when the theorem's preconditions fail; `satisfied` is then
    /// meaningless.
    pub applicable: bool,
    pub satisfied: bool,
    pub constants: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64, applicable: bool, constants: BTreeMap<String, f64>) -> Self {
        Self {
            lhs,
            rhs,
            applicable,
            satisfied: applicable && lhs <= rhs * (1.0 + BOUND_SLACK),
            constants,
        }
    }
}

fn seed_mean(traces: &[Vec<MetricsRecord>], field: impl Fn(&MetricsRecord) -> f64) -> Result<Vec<(usize, f64)>> {
    let first = traces.first().ok_or(Error::EmptyInput)?;
    for t in traces {
        if t.len() != first.len() || t.iter().zip(first).any(|(a, b)| a.step != b.step) {
            return Err(Error::InvalidParameter("traces record different steps".into()));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let mean = traces.iter().map(|t| field(&t[i])).sum::<f64>() / traces.len() as f64;
            (first[i].step, mean)
        })
        .collect())
}

/// Constants for the consensus bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConstants {
    pub lambda: f64,
    pub rho: f64,
    pub alpha: f64,
    pub delta_in_sq: f64,
    pub delta_out_sq: f64,
    pub n: usize,
    /// Smoothness constant `L`.
    pub l: f64,
}

impl ConsensusConstants {
    /// `ω = λ − 8ρ√N`.
    pub fn omega(&self) -> f64 {
        self.lambda - 8.0 * self.rho * (self.n as f64).sqrt()
    }

    /// `Δ = 12(1 − ω)/ω³`.
    pub fn big_delta(&self) -> f64 {
        let w = self.omega();
        12.0 * (1.0 - w) / (w * w * w)
    }

    /// `ρ* = λ / (8√N)`.
    pub fn rho_star(&self) -> f64 {
        self.lambda / (8.0 * (self.n as f64).sqrt())
    }

    /// Largest admissible constant step, `(1/3L)·√((2 − ω)ω² / (6 − 2ω))`.
    pub fn max_alpha(&self) -> f64 {
        let w = self.omega();
        ((2.0 - w) * w * w / (6.0 - 2.0 * w)).sqrt() / (3.0 * self.l)
    }

    /// `α²·Δ·(δ²_in + δ²_out)`.
    pub fn bound(&self) -> f64 {
        self.alpha * self.alpha * self.big_delta() * (self.delta_in_sq + self.delta_out_sq)
    }
}

/// Compares `max_k` of the seed-averaged disagreement against
/// `α²Δ(δ²_in + δ²_out)`. Not applicable unless `ρ < ρ*` and `α` is
/// admissible.
pub fn check_consensus_bound(traces: &[Vec<MetricsRecord>], c: &ConsensusConstants) -> Result<BoundReport> {
    let mean_h = seed_mean(traces, |r| r.h)?;
    let lhs = mean_h.iter().map(|&(_, h)| h).fold(0.0, f64::max);
    let applicable = c.lambda > 0.0 && c.rho < c.rho_star() && c.alpha <= c.max_alpha();
    let constants = BTreeMap::from([
        ("lambda".to_string(), c.lambda),
        ("rho".to_string(), c.rho),
        ("rho_star".to_string(), c.rho_star()),
        ("omega".to_string(), c.omega()),
        ("Delta".to_string(), c.big_delta()),
        ("alpha".to_string(), c.alpha),
        ("alpha_max".to_string(), c.max_alpha()),
        ("delta_in_sq".to_string(), c.delta_in_sq),
        ("delta_out_sq".to_string(), c.delta_out_sq),
        ("L".to_string(), c.l),
        ("N".to_string(), c.n as f64),
        ("seeds".to_string(), traces.len() as f64),
    ]);
    let rhs = if applicable { c.bound() } else { f64::NAN };
    Ok(BoundReport::new(lhs, rhs, applicable, constants))
}

/// Constants for the convergence bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub alpha: f64,
    pub l: f64,
    pub n: usize,
    pub rho: f64,
    pub chi_sq: f64,
    pub delta_in_sq: f64,
    pub delta_out_sq: f64,
    /// `f(x̄⁰)`.
    pub f0: f64,
    /// `f* = inf f`.
    pub f_star: f64,
}

impl ConvergenceConstants {
    /// Right-hand side of the convergence bound over `k` steps given
    /// `sum_h = Σ_{k=1..K} E[H^k]`.
    pub fn bound(&self, k: usize, sum_h: f64) -> f64 {
        let (a, l, n, kf) = (self.alpha, self.l, self.n as f64, k as f64);
        let est_mix = self.rho * self.rho * n + self.chi_sq;
        2.0 * (self.f0 - self.f_star) / (a * kf)
            + 2.0 * a * self.delta_in_sq * l / n
            + (36.0 * est_mix + 3.0 * a * a * l * l) / (a * a * kf) * sum_h
            + 96.0 * est_mix * (self.delta_in_sq + self.delta_out_sq)
    }
}

/// Compares `(1/K) Σ_{k=1..K} E‖∇f(x̄^k)‖²` against the convergence bound,
/// using the measured `Σ_{k=1..K} E[H^k]`. Traces must record every step
/// `0..=K`. Not applicable unless `α ≤ 1/(2√3 L)`.
pub fn check_convergence_bound(traces: &[Vec<MetricsRecord>], c: &ConvergenceConstants) -> Result<BoundReport> {
    let g = seed_mean(traces, |r| r.grad_norm_sq)?;
    let h = seed_mean(traces, |r| r.h)?;
    if g.iter().enumerate().any(|(i, &(step, _))| step != i) || g.len() < 2 {
        return Err(Error::InvalidParameter("convergence check needs a record at every step".into()));
    }
    let k = g.len() - 1;
    let lhs = g[1..].iter().map(|&(_, v)| v).sum::<f64>() / k as f64;
    let sum_h: f64 = h[1..].iter().map(|&(_, v)| v).sum();
    let applicable = c.alpha <= 1.0 / (2.0 * 3f64.sqrt() * c.l);
    let rhs = c.bound(k, sum_h);
    let constants = BTreeMap::from([
        ("alpha".to_string(), c.alpha),
        ("L".to_string(), c.l),
        ("N".to_string(), c.n as f64),
        ("K".to_string(), k as f64),
        ("rho".to_string(), c.rho),
        ("chi_sq".to_string(), c.chi_sq),
        ("delta_in_sq".to_string(), c.delta_in_sq),
        ("delta_out_sq".to_string(), c.delta_out_sq),
        ("f0".to_string(), c.f0),
        ("f_star".to_string(), c.f_star),
        ("sum_H".to_string(), sum_h),
        ("seeds".to_string(), traces.len() as f64),
    ]);
    Ok(BoundReport::new(lhs, rhs, applicable, constants))
}

/// Left Perron vector `p` of `W` (`pᵀW = pᵀ`, `1ᵀp = 1`) and the limit
/// `y∞ = Σ_n p_n z_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub p: Vec<f64>,
    pub y: Vec<f64>,
}

/// Power iteration on the lazy chain `p ← ½(p + Wᵀp)`, which has the same
/// fixed point as `Wᵀ` but converges even when `W` is periodic.
pub fn left_perron_vector(w: &MixingMatrix) -> Result<Vec<f64>> {
    let n = w.size();
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..PERRON_MAX_ITER {
        let mut next = vec![0.0; n];
        for (i, &pi) in p.iter().enumerate() {
            for (j, nj) in next.iter_mut().enumerate() {
                *nj += pi * w.get(i, j);
            }
        }
        let total: f64 = next.iter().zip(&p).map(|(a, b)| 0.5 * (a + b)).sum();
        let next: Vec<f64> = next.iter().zip(&p).map(|(a, b)| 0.5 * (a + b) / total).collect();
        let change: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if change < PERRON_TOL {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence(PERRON_MAX_ITER))
}

pub fn fixed_point_weighted(w: &MixingMatrix, targets: &[Vec<f64>]) -> Result<FixedPoint> {
    if targets.len() != w.size() {
        return Err(Error::DimensionMismatch {
            expected: w.size(),
            found: targets.len(),
        });
    }
    let p = left_perron_vector(w)?;
    let d = targets.first().ok_or(Error::EmptyInput)?.len();
    let y = (0..d).map(|k| p.iter().zip(targets).map(|(pn, z)| pn * z[k]).sum()).collect();
    Ok(FixedPoint { p, y })
}

/// The three factors of the asymptotic learning error and their
/// combination `(ρ²N + χ²)·(δ²_in/N · ΣE[H] + δ²_in + δ²_out)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// `ρ²N`.
    pub estimation: f64,
    /// `χ²`.
    pub mixing: f64,
    /// `Σ_k E[H^k]`.
    pub consensus: f64,
    pub combined: f64,
}

pub fn asymptotic_error_budget(
    rho: f64,
    n: usize,
    chi_sq: f64,
    sum_h: f64,
    delta_in_sq: f64,
    delta_out_sq: f64,
) -> ErrorBudget {
    let estimation = rho * rho * n as f64;
    ErrorBudget {
        estimation,
        mixing: chi_sq,
        consensus: sum_h,
        combined: (estimation + chi_sq) * (delta_in_sq / n as f64 * sum_h + delta_in_sq + delta_out_sq),
    }
}
