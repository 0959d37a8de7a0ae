//! Robust aggregation rules.
//!
//! Every rule maps worker `n`'s own model and the messages it received from
//! its neighbors to its next model. Rules built on a shared *base
//! aggregator* use the generic form
//!
//! ```text
//! A_n = (1 - r_n) · A(x_n, {x̃_m}) + r_n · x_n
//! ```
//!
//! (see [`generic_combine`]). Ties are always broken towards the lowest
//! worker id so runs are reproducible bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MixingMatrix, Topology};

pub const GEOMED_SMOOTHING: f64 = 1e-12;
pub const GEOMED_TOL: f64 = 1e-10;
pub const GEOMED_MAX_ITER: usize = 1000;

/// The weights `w′_nm` worker `n` assigns to itself and its neighbors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborWeights(BTreeMap<usize, f64>);

impl NeighborWeights {
    pub fn new(weights: BTreeMap<usize, f64>) -> Self {
        Self(weights)
    }

    /// Row `n` of `w`, restricted to `n` and its neighbors in `t`.
    pub fn from_matrix(w: &MixingMatrix, t: &Topology, n: usize) -> Self {
        let mut map = BTreeMap::new();
        map.insert(n, w.get(n, n));
        for m in t.neighbors(n) {
            map.insert(m, w.get(n, m));
        }
        Self(map)
    }

    /// `1 / (deg + 1)` on `own` and each of `neighbors`.
    pub fn uniform(own: usize, neighbors: &[usize]) -> Self {
        let v = 1.0 / (neighbors.len() + 1) as f64;
        let mut map: BTreeMap<usize, f64> = neighbors.iter().map(|&m| (m, v)).collect();
        map.insert(own, v);
        Self(map)
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.0.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    /// `W′_n(U^max)`: the sum of the `q` largest weights on neighbors
    /// (own weight excluded).
    pub fn largest_neighbor_mass(&self, own: usize, q: usize) -> f64 {
        let mut w: Vec<f64> = self.iter().filter(|&(m, _)| m != own).map(|(_, v)| v).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        w.iter().take(q).sum()
    }
}

/// A message `x̃_{m,n}` received from worker `from`.
#[derive(Clone, Copy, Debug)]
pub struct Message<'a> {
    pub from: usize,
    pub value: &'a [f64],
}

/// Everything worker `own_id` feeds into its aggregation rule.
#[derive(Clone, Debug)]
pub struct AggregationInput<'a> {
    pub own_id: usize,
    pub own: &'a [f64],
    pub messages: Vec<Message<'a>>,
    pub weights: Option<&'a NeighborWeights>,
}

impl<'a> AggregationInput<'a> {
    pub fn new(own_id: usize, own: &'a [f64], messages: Vec<Message<'a>>) -> Self {
        Self {
            own_id,
            own,
            messages,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: &'a NeighborWeights) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn dim(&self) -> usize {
        self.own.len()
    }

    /// Number of neighbors, `N_n + B_n`.
    pub fn degree(&self) -> usize {
        self.messages.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for m in &self.messages {
            if m.value.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.value.len(),
                });
            }
            if m.from == self.own_id {
                return Err(Error::InvalidParameter(format!(
                    "worker {} sent a message to itself",
                    m.from
                )));
            }
        }
        Ok(())
    }

    /// Own model and messages as `(id, value)`, sorted by id.
    pub fn closed_neighborhood(&self) -> Vec<(usize, &'a [f64])> {
        let mut all: Vec<(usize, &'a [f64])> = self.messages.iter().map(|m| (m.from, m.value)).collect();
        all.push((self.own_id, self.own));
        all.sort_by_key(|&(id, _)| id);
        all
    }

    fn sorted_messages(&self) -> Vec<(usize, &'a [f64])> {
        let mut all: Vec<(usize, &'a [f64])> = self.messages.iter().map(|m| (m.from, m.value)).collect();
        all.sort_by_key(|&(id, _)| id);
        all
    }

    fn require_weights(&self, rule: &'static str) -> Result<&'a NeighborWeights> {
        let w = self.weights.ok_or(Error::MissingWeights(rule))?;
        for (id, _) in self.closed_neighborhood() {
            w.get(id).ok_or(Error::UnknownWorker(id))?;
        }
        Ok(w)
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(inputs: &[&[f64]]) -> Result<usize> {
    let first = inputs.first().ok_or(Error::EmptyInput)?;
    let d = first.len();
    for v in inputs {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    Ok(d)
}

/// `(1 - r) · base_out + r · own`.
pub fn generic_combine(base_out: &[f64], own: &[f64], r: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::InvalidParameter(format!("self-trust r_n = {r} outside [0, 1)")));
    }
    if base_out.len() != own.len() {
        return Err(Error::DimensionMismatch {
            expected: own.len(),
            found: base_out.len(),
        });
    }
    if r == 0.0 {
        return Ok(base_out.to_vec());
    }
    Ok(base_out.iter().zip(own).map(|(b, x)| (1.0 - r) * b + r * x).collect())
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median; even counts average the two central values.
pub fn coo_med(inputs: &[&[f64]]) -> Result<Vec<f64>> {
    let d = check_dims(inputs)?;
    let mut column = vec![0.0; inputs.len()];
    Ok((0..d)
        .map(|k| {
            for (slot, v) in column.iter_mut().zip(inputs) {
                *slot = v[k];
            }
            median_of(&mut column)
        })
        .collect())
}

/// Sum of Euclidean distances from `x` to every input.
pub fn geo_med_objective(x: &[f64], inputs: &[&[f64]]) -> f64 {
    inputs.iter().map(|v| dist_sq(x, v).sqrt()).sum()
}

/// Geometric median by Weiszfeld iteration started at the mean, with each
/// step extended by doubling while the objective keeps decreasing.
///
/// Distances in the reweighting are floored at [`GEOMED_SMOOTHING`]. If an
/// input point has a lower objective than the final iterate (the optimum
/// sits on a data point), that point is returned instead.
pub fn geo_med(inputs: &[&[f64]], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let d = check_dims(inputs)?;
    if inputs.len() == 1 {
        return Ok(inputs[0].to_vec());
    }
    let s = inputs.len() as f64;
    let mut x: Vec<f64> = (0..d).map(|k| inputs.iter().map(|v| v[k]).sum::<f64>() / s).collect();
    let mut next = vec![0.0; d];
    for _ in 0..max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut denom = 0.0;
        for v in inputs {
            let inv = 1.0 / dist_sq(&x, v).sqrt().max(GEOMED_SMOOTHING);
            denom += inv;
            for (n, vi) in next.iter_mut().zip(v.iter()) {
                *n += inv * vi;
            }
        }
        next.iter_mut().for_each(|v| *v /= denom);
        // Plain Weiszfeld crawls when the inputs are nearly collinear; keep
        // doubling the step along its direction while the objective drops.
        let mut best = geo_med_objective(&next, inputs);
        let step: Vec<f64> = next.iter().zip(&x).map(|(b, a)| b - a).collect();
        let mut scale = 2.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + scale * s).collect();
            let f = geo_med_objective(&trial, inputs);
            if !(f < best) {
                break;
            }
            best = f;
            next = trial;
            scale *= 2.0;
        }
        let moved = dist_sq(&x, &next).sqrt();
        std::mem::swap(&mut x, &mut next);
        if moved < tol {
            break;
        }
    }
    let best_input = inputs
        .iter()
        .map(|v| (geo_med_objective(v, inputs), *v))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty");
    if best_input.0 < geo_med_objective(&x, inputs) {
        return Ok(best_input.1.to_vec());
    }
    Ok(x)
}

/// Index of the Krum winner among `inputs`: the input whose summed squared
/// distance to its `S - q - 2` nearest other inputs is smallest (lowest
/// index on ties).
pub fn krum_index(inputs: &[&[f64]], q: usize) -> Result<usize> {
    check_dims(inputs)?;
    let s = inputs.len();
    if s < q + 3 {
        return Err(Error::InsufficientInputs {
            rule: "krum",
            needed: q + 3,
            got: s,
        });
    }
    let keep = s - q - 2;
    let mut best = (f64::INFINITY, 0);
    for (i, xi) in inputs.iter().enumerate() {
        let mut d: Vec<f64> = inputs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, xj)| dist_sq(xi, xj))
            .collect();
        d.sort_by(f64::total_cmp);
        let score: f64 = d[..keep].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok(best.1)
}

pub fn krum(inputs: &[&[f64]], q: usize) -> Result<Vec<f64>> {
    Ok(inputs[krum_index(inputs, q)?].to_vec())
}

/// Coordinate-wise trimmed mean: drop the `q` largest and `q` smallest
/// values of each coordinate, average the rest.
pub fn tri_mean(inputs: &[&[f64]], q: usize) -> Result<Vec<f64>> {
    let d = check_dims(inputs)?;
    let s = inputs.len();
    if s <= 2 * q {
        return Err(Error::InsufficientInputs {
            rule: "trimean",
            needed: 2 * q,
            got: s,
        });
    }
    let mut column = vec![0.0; s];
    let kept = (s - 2 * q) as f64;
    Ok((0..d)
        .map(|k| {
            for (slot, v) in column.iter_mut().zip(inputs) {
                *slot = v[k];
            }
            column.sort_by(f64::total_cmp);
            column[q..s - q].iter().sum::<f64>() / kept
        })
        .collect())
}

/// `min(1, τ/‖v‖) · v`.
pub fn clip(v: &[f64], tau: f64) -> Vec<f64> {
    let n = norm(v);
    if n <= tau {
        v.to_vec()
    } else {
        let s = tau / n;
        v.iter().map(|x| x * s).collect()
    }
}

/// `Σ_{m ∈ U} w_nm`.
pub fn cumulative_weight(weights: &NeighborWeights, ids: &[usize]) -> Result<f64> {
    ids.iter()
        .map(|&id| weights.get(id).ok_or(Error::UnknownWorker(id)))
        .sum()
}

/// `Σ_m w_nm · x̃_m` over the closed neighborhood, evaluated in the
/// self-centered form `x_n + Σ_m w_nm (x̃_m − x_n)`, which is equal because
/// the weights sum to one.
///
/// The sum is accumulated per coordinate in id order starting from zero;
/// [`crate::attacks::isolation_attack`] relies on this order.
pub fn weighted_mean(input: &AggregationInput) -> Result<Vec<f64>> {
    input.validate()?;
    let w = input.require_weights("weimean")?;
    let terms: Vec<(f64, &[f64])> = input
        .closed_neighborhood()
        .into_iter()
        .map(|(id, v)| (w.get(id).expect("checked"), v))
        .collect();
    Ok(input
        .own
        .iter()
        .enumerate()
        .map(|(k, &o)| o + terms.iter().fold(0.0, |acc, (wm, v)| acc + wm * (v[k] - o)))
        .collect())
}

fn iterative_filter(
    members: &[(usize, &[f64], f64)],
    own_id: usize,
    q: usize,
    trace: &mut Vec<usize>,
) -> Vec<f64> {
    let d = members[0].1.len();
    let mut trusted: Vec<bool> = vec![true; members.len()];
    let average = |trusted: &[bool]| -> Vec<f64> {
        let kept: Vec<&(usize, &[f64], f64)> = members.iter().zip(trusted).filter(|(_, &t)| t).map(|(m, _)| m).collect();
        // Equal weights reduce to a plain mean, so uniform IOS and FABA agree bitwise.
        let equal = kept.iter().all(|m| m.2 == kept[0].2);
        let weight = |m: &(usize, &[f64], f64)| if equal { 1.0 } else { m.2 };
        let total: f64 = kept.iter().map(|m| weight(m)).sum();
        let mut acc = vec![0.0; d];
        for m in &kept {
            let w = weight(m);
            for (a, x) in acc.iter_mut().zip(m.1.iter()) {
                *a += w * x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        acc
    };
    for _ in 0..q {
        let avg = average(&trusted);
        let mut worst: Option<(f64, usize)> = None;
        for (idx, (id, v, _)) in members.iter().enumerate() {
            if !trusted[idx] || *id == own_id {
                continue;
            }
            let dist = dist_sq(v, &avg);
            // Members are in id order, so strict `>` keeps the lowest id on ties.
            if worst.is_none_or(|(best, _)| dist > best) {
                worst = Some((dist, idx));
            }
        }
        if let Some((_, idx)) = worst {
            trusted[idx] = false;
            trace.push(members[idx].0);
        }
    }
    average(&trusted)
}

/// Iterative outlier scissor.
///
/// Starting from the full closed neighborhood, `q` times: take the
/// `w′`-weighted average of the trusted set (normalised by its cumulative
/// weight) and drop the neighbor farthest from it. The own model is never
/// dropped. Returns the normalised weighted average of what is left.
pub fn ios(input: &AggregationInput, q: usize) -> Result<Vec<f64>> {
    ios_with_trace(input, q).map(|(v, _)| v)
}

/// [`ios`], also returning the discarded ids in discard order.
pub fn ios_with_trace(input: &AggregationInput, q: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    input.validate()?;
    let w = input.require_weights("ios")?;
    if q >= input.degree().max(1) && q > 0 {
        return Err(Error::InsufficientInputs {
            rule: "ios",
            needed: q,
            got: input.degree(),
        });
    }
    let members: Vec<(usize, &[f64], f64)> = input
        .closed_neighborhood()
        .into_iter()
        .map(|(id, v)| (id, v, w.get(id).expect("checked")))
        .collect();
    let mut trace = Vec::with_capacity(q);
    let out = iterative_filter(&members, input.own_id, q, &mut trace);
    Ok((out, trace))
}

/// FABA: like [`ios`] but with unweighted averages.
pub fn faba(input: &AggregationInput, q: usize) -> Result<Vec<f64>> {
    faba_with_trace(input, q).map(|(v, _)| v)
}

pub fn faba_with_trace(input: &AggregationInput, q: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    input.validate()?;
    if q > 0 && q >= input.degree() {
        return Err(Error::InsufficientInputs {
            rule: "faba",
            needed: q + 1,
            got: input.degree() + 1,
        });
    }
    let members: Vec<(usize, &[f64], f64)> = input
        .closed_neighborhood()
        .into_iter()
        .map(|(id, v)| (id, v, 1.0))
        .collect();
    let mut trace = Vec::with_capacity(q);
    let out = iterative_filter(&members, input.own_id, q, &mut trace);
    Ok((out, trace))
}

fn clipped_sum(input: &AggregationInput, tau: f64, weight_of: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("clipping radius {tau} must be positive")));
    }
    let own = input.own;
    let mut out = own.to_vec();
    let mut diff = vec![0.0; own.len()];
    for (id, v) in input.sorted_messages() {
        for ((d, x), o) in diff.iter_mut().zip(v).zip(own) {
            *d = x - o;
        }
        let w = weight_of(id);
        for (o, c) in out.iter_mut().zip(clip(&diff, tau)) {
            *o += w * c;
        }
    }
    Ok(out)
}

/// Self centered clipping: `Σ_m w′_nm (x_n + CLIP(x̃_m − x_n, τ))`.
pub fn scc(input: &AggregationInput, tau: f64) -> Result<Vec<f64>> {
    input.validate()?;
    let w = input.require_weights("scc")?;
    clipped_sum(input, tau, |id| w.get(id).expect("checked"))
}

/// Centered clipping with equal weights `1/(N_n + B_n + 1)`.
pub fn cc(input: &AggregationInput, tau: f64) -> Result<Vec<f64>> {
    input.validate()?;
    let v = 1.0 / (input.degree() + 1) as f64;
    clipped_sum(input, tau, |_| v)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Decentralized RSA: `x_n + α·C_R·Σ_m sign(x̃_m − x_n)`, with `sign(0) = 0`.
pub fn drsa(input: &AggregationInput, cr: f64, alpha: f64) -> Result<Vec<f64>> {
    input.validate()?;
    let step = alpha * cr;
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("α·C_R = {step} must be positive")));
    }
    let own = input.own;
    let mut total = vec![0.0; own.len()];
    for m in &input.messages {
        for ((t, x), o) in total.iter_mut().zip(m.value).zip(own) {
            *t += sign(x - o);
        }
    }
    Ok(own.iter().zip(total).map(|(o, t)| o + step * t).collect())
}

/// Estimate of how many Byzantine neighbors a rule should tolerate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QEstimate {
    Fixed(usize),
    /// Use the true number of Byzantine neighbors `B_n`.
    ByzantineNeighbors,
}

impl QEstimate {
    pub fn resolve(self, byzantine_neighbors: usize) -> usize {
        match self {
            QEstimate::Fixed(q) => q,
            QEstimate::ByzantineNeighbors => byzantine_neighbors,
        }
    }
}

impl fmt::Display for QEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QEstimate::Fixed(q) => write!(f, "{q}"),
            QEstimate::ByzantineNeighbors => f.write_str("auto"),
        }
    }
}

impl FromStr for QEstimate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(QEstimate::ByzantineNeighbors);
        }
        s.parse()
            .map(QEstimate::Fixed)
            .map_err(|_| Error::parse(s, "expected a count or `auto`"))
    }
}

/// Aggregation rule plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggregatorSpec {
    WeiMean,
    CooMed { r: f64 },
    GeoMed { r: f64, tol: f64, max_iter: usize },
    Krum { q: QEstimate, r: f64 },
    TriMean { q: QEstimate },
    Faba { q: QEstimate },
    Cc { tau: f64 },
    Scc { tau: f64 },
    Drsa { cr: f64 },
    Ios { q: QEstimate },
    NoComm,
}

impl AggregatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::WeiMean => "weimean",
            AggregatorSpec::CooMed { .. } => "coomed",
            AggregatorSpec::GeoMed { .. } => "geomed",
            AggregatorSpec::Krum { .. } => "krum",
            AggregatorSpec::TriMean { .. } => "trimean",
            AggregatorSpec::Faba { .. } => "faba",
            AggregatorSpec::Cc { .. } => "cc",
            AggregatorSpec::Scc { .. } => "scc",
            AggregatorSpec::Drsa { .. } => "drsa",
            AggregatorSpec::Ios { .. } => "ios",
            AggregatorSpec::NoComm => "nocomm",
        }
    }

    /// Whether the rule reads the `w′` weights.
    pub fn needs_weights(&self) -> bool {
        matches!(
            self,
            AggregatorSpec::WeiMean | AggregatorSpec::Scc { .. } | AggregatorSpec::Ios { .. }
        )
    }

    /// Checks that the rule can run on a worker with `degree` neighbors of
    /// which `byzantine_neighbors` are Byzantine.
    pub fn validate_for(&self, degree: usize, byzantine_neighbors: usize) -> Result<()> {
        let s = degree + 1;
        let fail = |msg: String| Err(Error::InvalidParameter(format!("{}: {msg}", self.name())));
        match *self {
            AggregatorSpec::Krum { q, .. } => {
                let q = q.resolve(byzantine_neighbors);
                if s < q + 3 {
                    return fail(format!("needs q + 3 = {} inputs, worker has {s}", q + 3));
                }
            }
            AggregatorSpec::TriMean { q } => {
                let q = q.resolve(byzantine_neighbors);
                if degree <= 2 * q {
                    return fail(format!("needs more than 2q = {} neighbors, worker has {degree}", 2 * q));
                }
            }
            AggregatorSpec::Faba { q } | AggregatorSpec::Ios { q } => {
                let q = q.resolve(byzantine_neighbors);
                if q > 0 && q >= degree {
                    return fail(format!("q = {q} must be below the degree {degree}"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-call context a rule may need beyond its inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundInfo {
    /// Current step size `α^k` (used by DRSA).
    pub alpha: f64,
    /// `B_n`, used to resolve [`QEstimate::ByzantineNeighbors`].
    pub byzantine_neighbors: usize,
}

fn base_inputs<'a>(input: &AggregationInput<'a>) -> Vec<&'a [f64]> {
    input.closed_neighborhood().into_iter().map(|(_, v)| v).collect()
}

/// Dispatches to the rule selected by `spec`.
pub fn aggregate(spec: &AggregatorSpec, input: &AggregationInput, round: RoundInfo) -> Result<Vec<f64>> {
    input.validate()?;
    let b = round.byzantine_neighbors;
    match *spec {
        AggregatorSpec::WeiMean => weighted_mean(input),
        AggregatorSpec::NoComm => Ok(input.own.to_vec()),
        AggregatorSpec::CooMed { r } => generic_combine(&coo_med(&base_inputs(input))?, input.own, r),
        AggregatorSpec::GeoMed { r, tol, max_iter } => {
            generic_combine(&geo_med(&base_inputs(input), tol, max_iter)?, input.own, r)
        }
        AggregatorSpec::Krum { q, r } => generic_combine(&krum(&base_inputs(input), q.resolve(b))?, input.own, r),
        AggregatorSpec::TriMean { q } => {
            let q = q.resolve(b);
            let neighbors: Vec<&[f64]> = input.sorted_messages().into_iter().map(|(_, v)| v).collect();
            let base = tri_mean(&neighbors, q)?;
            let r = 1.0 / (input.degree() - 2 * q + 1) as f64;
            generic_combine(&base, input.own, r)
        }
        AggregatorSpec::Faba { q } => faba(input, q.resolve(b)),
        AggregatorSpec::Ios { q } => ios(input, q.resolve(b)),
        AggregatorSpec::Cc { tau } => cc(input, tau),
        AggregatorSpec::Scc { tau } => scc(input, tau),
        AggregatorSpec::Drsa { cr } => drsa(input, cr, round.alpha),
    }
}

fn parse_params(input: &str, body: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if body.is_empty() {
        return Ok(out);
    }
    for pair in body.split(',') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::parse(input, format!("parameter `{pair}` is not key=value")))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::parse(input, format!("parameter `{k}` given twice")));
        }
    }
    Ok(out)
}

pub(crate) struct Params<'a> {
    input: &'a str,
    map: BTreeMap<String, String>,
}

impl<'a> Params<'a> {
    pub(crate) fn parse(input: &'a str, body: &str) -> Result<Self> {
        Ok(Self {
            input,
            map: parse_params(input, body)?,
        })
    }

    pub(crate) fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::parse(self.input, format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub(crate) fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::parse(self.input, format!("missing required parameter `{key}`")))
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::parse(self.input, format!("unexpected parameter `{k}`"))),
        }
    }
}

impl FromStr for AggregatorSpec {
    type Err = Error;

    /// Parses `name[:key=value,...]`, e.g. `ios:q=2`, `scc:tau=0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, body) = s.split_once(':').unwrap_or((s, ""));
        let mut p = Params::parse(s, body)?;
        let spec = match name.trim().to_ascii_lowercase().as_str() {
            "weimean" => AggregatorSpec::WeiMean,
            "nocomm" => AggregatorSpec::NoComm,
            "coomed" => AggregatorSpec::CooMed {
                r: p.take("r")?.unwrap_or(0.0),
            },
            "geomed" => AggregatorSpec::GeoMed {
                r: p.take("r")?.unwrap_or(0.0),
                tol: p.take("tol")?.unwrap_or(GEOMED_TOL),
                max_iter: p.take("iter")?.unwrap_or(GEOMED_MAX_ITER),
            },
            "krum" => AggregatorSpec::Krum {
                q: p.require("q")?,
                r: p.take("r")?.unwrap_or(0.0),
            },
            "trimean" => AggregatorSpec::TriMean { q: p.require("q")? },
            "faba" => AggregatorSpec::Faba { q: p.require("q")? },
            "ios" => AggregatorSpec::Ios { q: p.require("q")? },
            "cc" => AggregatorSpec::Cc { tau: p.require("tau")? },
            "scc" => AggregatorSpec::Scc { tau: p.require("tau")? },
            "drsa" => AggregatorSpec::Drsa { cr: p.require("cr")? },
            other => return Err(Error::parse(s, format!("unknown aggregator `{other}`"))),
        };
        p.finish()?;
        match spec {
            AggregatorSpec::CooMed { r } | AggregatorSpec::GeoMed { r, .. } | AggregatorSpec::Krum { r, .. }
                if !(0.0..1.0).contains(&r) =>
            {
                Err(Error::parse(s, "r must lie in [0, 1)"))
            }
            AggregatorSpec::Cc { tau } | AggregatorSpec::Scc { tau } if !(tau > 0.0) => {
                Err(Error::parse(s, "tau must be positive"))
            }
            AggregatorSpec::Drsa { cr } if !(cr > 0.0) => Err(Error::parse(s, "cr must be positive")),
            spec => Ok(spec),
        }
    }
}

impl fmt::Display for AggregatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        match self {
            AggregatorSpec::WeiMean | AggregatorSpec::NoComm => f.write_str(name),
            AggregatorSpec::CooMed { r } => {
                if *r == 0.0 {
                    f.write_str(name)
                } else {
                    write!(f, "{name}:r={r}")
                }
            }
            AggregatorSpec::GeoMed { r, tol, max_iter } => {
                write!(f, "{name}:r={r},tol={tol:e},iter={max_iter}")
            }
            AggregatorSpec::Krum { q, r } => {
                if *r == 0.0 {
                    write!(f, "{name}:q={q}")
                } else {
                    write!(f, "{name}:q={q},r={r}")
                }
            }
            AggregatorSpec::TriMean { q } | AggregatorSpec::Faba { q } | AggregatorSpec::Ios { q } => {
                write!(f, "{name}:q={q}")
            }
            AggregatorSpec::Cc { tau } | AggregatorSpec::Scc { tau } => write!(f, "{name}:tau={tau}"),
            AggregatorSpec::Drsa { cr } => write!(f, "{name}:cr={cr}"),
        }
    }
}

#[cfg(test)]
mod oracle_tests;

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Vec<f64> {
        vec![v]
    }

    fn input_from<'a>(own: &'a [f64], msgs: &'a [Vec<f64>]) -> AggregationInput<'a> {
        let messages = msgs
            .iter()
            .enumerate()
            .map(|(i, v)| Message { from: i + 1, value: v })
            .collect();
        AggregationInput::new(0, own, messages)
    }

    fn round() -> RoundInfo {
        RoundInfo {
            alpha: 0.1,
            byzantine_neighbors: 0,
        }
    }

    #[test]
    fn generic_combine_cases() {
        assert_eq!(generic_combine(&[3.0], &[1.0], 0.0).unwrap(), vec![3.0]);
        assert_eq!(generic_combine(&[0.0], &[2.0], 0.5).unwrap(), vec![1.0]);
        assert_eq!(generic_combine(&[2.5, -1.0], &[2.5, -1.0], 0.7).unwrap(), vec![2.5, -1.0]);
        assert!(generic_combine(&[0.0], &[0.0], 1.0).is_err());
        assert!(generic_combine(&[0.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn coo_med_cases() {
        let (z1, z2) = (s(0.25), s(7.0));
        let inputs: Vec<&[f64]> = vec![&z1, &z1, &z1, &z2, &z2];
        assert_eq!(coo_med(&inputs).unwrap(), z1);
        let (a, b, c) = (s(1.0), s(2.0), s(100.0));
        assert_eq!(coo_med(&[&a, &b, &c]).unwrap(), s(2.0));
        assert_eq!(coo_med(&[&a, &b, &c, &s(3.0)]).unwrap(), s(2.5));
    }

    #[test]
    fn geo_med_cases() {
        let v = vec![1.0, -2.0];
        assert_eq!(geo_med(&[&v], GEOMED_TOL, GEOMED_MAX_ITER).unwrap(), v);

        let (a, b) = (s(0.0), s(10.0));
        let out = geo_med(&[&a, &a, &b], GEOMED_TOL, GEOMED_MAX_ITER).unwrap();
        assert!(out[0].abs() < 1e-9, "{out:?}");

        let pts = [vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let out = geo_med(&refs, GEOMED_TOL, GEOMED_MAX_ITER).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && out[1].abs() < 1e-9, "{out:?}");
    }

    #[test]
    fn krum_cases() {
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 10.0].iter().map(|&x| s(x)).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(krum_index(&refs, 1).unwrap(), 0);
        assert_eq!(krum(&refs, 1).unwrap(), s(0.0));
        assert!(krum(&refs, 2).is_err());
        let v = vec![3.0, 4.0];
        assert_eq!(krum(&[&v, &v, &v], 0).unwrap(), v);
    }

    #[test]
    fn tri_mean_cases() {
        let pts: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0, 100.0].iter().map(|&x| s(x)).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(tri_mean(&refs, 1).unwrap(), s(3.0));
        assert_eq!(tri_mean(&refs, 0).unwrap(), s(22.0));
        assert!(tri_mean(&refs[..2], 1).is_err());
    }

    #[test]
    fn faba_cases() {
        let own = s(0.0);
        let msgs = vec![s(0.1), s(0.2), s(10.0)];
        let out = faba(&input_from(&own, &msgs), 1).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-15);
        let out = faba(&input_from(&own, &msgs), 0).unwrap();
        assert!((out[0] - 10.3 / 4.0).abs() < 1e-15);
        assert!(faba(&input_from(&own, &msgs), 3).is_err());
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clip(&[3.0, 4.0], 10.0), vec![3.0, 4.0]);
        let c = clip(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn scc_cases() {
        let own = s(0.0);
        let msgs = vec![s(10.0)];
        let w = NeighborWeights::uniform(0, &[1]);
        let inp = input_from(&own, &msgs).with_weights(&w);
        assert!((scc(&inp, 1.0).unwrap()[0] - 0.5).abs() < 1e-15);
        assert!((scc(&inp, 1e9).unwrap()[0] - 5.0).abs() < 1e-12);
        let same = vec![s(0.0), s(0.0)];
        let w2 = NeighborWeights::uniform(0, &[1, 2]);
        assert_eq!(scc(&input_from(&own, &same).with_weights(&w2), 0.3).unwrap(), own);
        assert!(matches!(scc(&input_from(&own, &msgs), 1.0), Err(Error::MissingWeights(_))));
    }

    #[test]
    fn cc_differs_from_scc_on_path() {
        // Path 0 - 1 - 2 seen from the middle worker and from an end worker.
        use crate::graph::{metropolis_weights, Topology};
        let t = Topology::from_edges(3, 0, &[(0, 1), (1, 2)]).unwrap();
        let wp = metropolis_weights(&t);
        let x = [s(0.0), s(1.0), s(5.0)];
        let w0 = NeighborWeights::from_matrix(&wp, &t, 0);
        let inp = AggregationInput::new(0, &x[0], vec![Message { from: 1, value: &x[1] }]).with_weights(&w0);
        let a = scc(&inp, 10.0).unwrap()[0];
        let b = cc(&inp, 10.0).unwrap()[0];
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
        assert!((b - 0.5).abs() < 1e-15);
    }

    #[test]
    fn drsa_cases() {
        let own = s(0.0);
        assert_eq!(drsa(&input_from(&own, &[s(0.0), s(0.0)]), 0.5, 0.2).unwrap(), own);
        assert_eq!(drsa(&input_from(&own, &[s(1.0), s(-1.0)]), 0.5, 0.2).unwrap(), own);
        let out = drsa(&input_from(&own, &[s(1.0), s(2.0), s(3.0)]), 1.0, 0.1).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
        assert!(drsa(&input_from(&own, &[s(1.0)]), 0.0, 0.1).is_err());
    }

    #[test]
    fn ios_cases() {
        let own = s(0.0);
        let msgs = vec![s(0.1), s(0.2), s(10.0)];
        let w = NeighborWeights::uniform(0, &[1, 2, 3]);
        let inp = input_from(&own, &msgs).with_weights(&w);
        let (out, trace) = ios_with_trace(&inp, 1).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-15);
        assert_eq!(trace, vec![3]);
        let mean = ios(&inp, 0).unwrap();
        assert!((mean[0] - 10.3 / 4.0).abs() < 1e-15);
        assert!(ios(&inp, 3).is_err());
        assert!(matches!(ios(&input_from(&own, &msgs), 1), Err(Error::MissingWeights(_))));
    }

    #[test]
    fn ios_never_discards_own() {
        // The own model is the outlier; IOS must drop a neighbor instead.
        let own = s(100.0);
        let msgs = vec![s(0.0), s(0.1)];
        let w = NeighborWeights::uniform(0, &[1, 2]);
        let (_, trace) = ios_with_trace(&input_from(&own, &msgs).with_weights(&w), 1).unwrap();
        assert_eq!(trace.len(), 1);
        assert_ne!(trace[0], 0);
    }

    #[test]
    fn ios_ties_drop_lowest_id() {
        let own = s(0.0);
        let msgs = vec![s(1.0), s(-1.0)];
        let w = NeighborWeights::uniform(0, &[1, 2]);
        let (_, trace) = ios_with_trace(&input_from(&own, &msgs).with_weights(&w), 1).unwrap();
        assert_eq!(trace, vec![1]);
    }

    #[test]
    fn cumulative_weight_cases() {
        let w = NeighborWeights::uniform(0, &[1, 2, 3, 4]);
        assert!((cumulative_weight(&w, &[0, 1, 2, 3, 4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cumulative_weight(&w, &[]).unwrap(), 0.0);
        assert!((cumulative_weight(&w, &[1, 3]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(cumulative_weight(&w, &[9]), Err(Error::UnknownWorker(9))));
    }

    #[test]
    fn aggregate_dispatch() {
        let own = s(2.0);
        let msgs = vec![s(1.0), s(3.0)];
        let w = NeighborWeights::uniform(0, &[1, 2]);
        let inp = input_from(&own, &msgs).with_weights(&w);
        let out = aggregate(&AggregatorSpec::WeiMean, &inp, round()).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15);
        assert_eq!(aggregate(&AggregatorSpec::NoComm, &inp, round()).unwrap(), own);

        // TriMean keeps the single central neighbor and mixes in own with r = 1/2.
        let msgs = vec![s(-5.0), s(1.0), s(50.0)];
        let inp = input_from(&own, &msgs);
        let spec: AggregatorSpec = "trimean:q=1".parse().unwrap();
        assert_eq!(aggregate(&spec, &inp, round()).unwrap(), s(1.5));
    }

    #[test]
    fn spec_parsing() {
        let cases = ["ios:q=2", "trimean:q=2", "scc:tau=0.3", "drsa:cr=0.5", "krum:q=2", "faba:q=auto", "weimean", "nocomm", "coomed", "cc:tau=0.1"];
        for c in cases {
            let spec: AggregatorSpec = c.parse().unwrap();
            assert_eq!(spec.to_string(), c);
        }
        assert_eq!("ios:q=auto".parse::<AggregatorSpec>().unwrap(), AggregatorSpec::Ios { q: QEstimate::ByzantineNeighbors });
        assert!("ios".parse::<AggregatorSpec>().is_err());
        assert!("ios:q=2,tau=1".parse::<AggregatorSpec>().is_err());
        assert!("median".parse::<AggregatorSpec>().is_err());
        assert!("coomed:r=1".parse::<AggregatorSpec>().is_err());
        assert!("scc:tau=-1".parse::<AggregatorSpec>().is_err());
        let g: AggregatorSpec = "geomed".parse().unwrap();
        assert_eq!(g.to_string().parse::<AggregatorSpec>().unwrap(), g);
    }

    #[test]
    fn largest_neighbor_mass_excludes_own() {
        let mut m = BTreeMap::new();
        m.insert(0, 0.5);
        m.insert(1, 0.2);
        m.insert(2, 0.1);
        m.insert(3, 0.2);
        let w = NeighborWeights::new(m);
        assert!((w.largest_neighbor_mass(0, 2) - 0.4).abs() < 1e-15);
    }
}
