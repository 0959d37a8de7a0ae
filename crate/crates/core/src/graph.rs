//! Worker graphs, mixing matrices and their diagnostics.
//!
//! Worker ids are `0..n_honest + n_byzantine`; Byzantine workers always take
//! the trailing ids, so the honest block of any matrix is its leading
//! `n_honest × n_honest` corner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Tolerance used for every stochasticity and symmetry check.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Undirected graph over honest and Byzantine workers, without self-links.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n_honest: usize,
    n_byzantine: usize,
    adjacency: Vec<bool>,
}

impl Topology {
    /// Builds a topology from an edge list. Duplicate edges are merged;
    /// self-links and out-of-range ids are rejected.
    pub fn from_edges(n_honest: usize, n_byzantine: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_honest == 0 {
            return Err(Error::InvalidParameter("at least one honest worker is required".into()));
        }
        let size = n_honest + n_byzantine;
        let mut adjacency = vec![false; size * size];
        for &(i, j) in edges {
            if i >= size || j >= size {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) out of range for {size} workers"
                )));
            }
            if i == j {
                return Err(Error::InvalidParameter(format!("self-link on worker {i}")));
            }
            adjacency[i * size + j] = true;
            adjacency[j * size + i] = true;
        }
        Ok(Self {
            n_honest,
            n_byzantine,
            adjacency,
        })
    }

    pub fn n_honest(&self) -> usize {
        self.n_honest
    }

    pub fn n_byzantine(&self) -> usize {
        self.n_byzantine
    }

    pub fn size(&self) -> usize {
        self.n_honest + self.n_byzantine
    }

    pub fn is_honest(&self, id: usize) -> bool {
        id < self.n_honest
    }

    pub fn honest_ids(&self) -> std::ops::Range<usize> {
        0..self.n_honest
    }

    pub fn byzantine_ids(&self) -> std::ops::Range<usize> {
        self.n_honest..self.size()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.size() + j]
    }

    /// All neighbors of `id` in increasing id order.
    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        (0..self.size()).filter(|&m| self.has_edge(id, m)).collect()
    }

    /// `N_n`: honest neighbors of `id`.
    pub fn honest_neighbors(&self, id: usize) -> Vec<usize> {
        self.honest_ids().filter(|&m| self.has_edge(id, m)).collect()
    }

    /// `B_n`: Byzantine neighbors of `id`.
    pub fn byzantine_neighbors(&self, id: usize) -> Vec<usize> {
        self.byzantine_ids().filter(|&m| self.has_edge(id, m)).collect()
    }

    pub fn degree(&self, id: usize) -> usize {
        (0..self.size()).filter(|&m| self.has_edge(id, m)).count()
    }

    /// Edges as `[i, j]` with `i < j`, sorted lexicographically.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let s = self.size();
        let mut out = Vec::new();
        for i in 0..s {
            for j in i + 1..s {
                if self.has_edge(i, j) {
                    out.push([i, j]);
                }
            }
        }
        out
    }

    /// Whether the subgraph induced by honest workers is connected.
    pub fn honest_subgraph_connected(&self) -> bool {
        let n = self.n_honest;
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for m in self.honest_neighbors(i) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Erdos-Renyi graph. Draw order: one `f64` per unordered pair `(i, j)`,
/// `i < j`, in lexicographic order, from a ChaCha8 stream seeded with `seed`;
/// the edge exists when the draw is below `p`.
pub fn gen_erdos_renyi(n_honest: usize, n_byzantine: usize, p: f64, seed: u64) -> Result<Topology> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("edge probability {p} outside [0, 1]")));
    }
    let size = n_honest + n_byzantine;
    let mut rng = rng::seeded(seed);
    let mut edges = Vec::new();
    for i in 0..size {
        for j in i + 1..size {
            let u: f64 = rng.random();
            if u < p {
                edges.push((i, j));
            }
        }
    }
    Topology::from_edges(n_honest, n_byzantine, &edges)
}

/// Two cliques `A = 0..c` and `B = c..2c`. Worker `i` of `A` links to every
/// worker of `B` except `c + i`. Each castle additionally gets
/// `byzantine_per_castle` Byzantine workers wired to all of its honest
/// workers; castle A's Byzantine ids come first.
pub fn gen_two_castle(castle_size: usize, byzantine_per_castle: usize) -> Result<Topology> {
    if castle_size < 2 {
        return Err(Error::InvalidParameter("castle size must be at least 2".into()));
    }
    let c = castle_size;
    let n_honest = 2 * c;
    let mut edges = Vec::new();
    for castle in 0..2 {
        let base = castle * c;
        for i in 0..c {
            for j in i + 1..c {
                edges.push((base + i, base + j));
            }
        }
    }
    for i in 0..c {
        for j in 0..c {
            if i != j {
                edges.push((i, c + j));
            }
        }
    }
    for castle in 0..2 {
        for b in 0..byzantine_per_castle {
            let byz = n_honest + castle * byzantine_per_castle + b;
            for i in 0..c {
                edges.push((castle * c + i, byz));
            }
        }
    }
    Topology::from_edges(n_honest, 2 * byzantine_per_castle, &edges)
}

/// Octopus graph: a clique of `head_size` nodes, with `n_legs` paths of
/// `leg_length` nodes, leg `l` hanging off head node `l`.
///
/// Nodes are first laid out as head `0..head_size` followed by the legs in
/// order; `byz_placement` names nodes in that layout. The result is then
/// relabelled so honest nodes keep their relative order and the Byzantine
/// nodes move to the trailing ids (in the order given).
pub fn gen_octopus(
    head_size: usize,
    n_legs: usize,
    leg_length: usize,
    byz_placement: &[usize],
) -> Result<Topology> {
    if head_size == 0 {
        return Err(Error::InvalidParameter("octopus head must have at least one node".into()));
    }
    if n_legs > head_size {
        return Err(Error::InvalidParameter(format!(
            "{n_legs} legs need distinct attachment points but the head has {head_size} nodes"
        )));
    }
    let total = head_size + n_legs * leg_length;
    let mut raw = Vec::new();
    for i in 0..head_size {
        for j in i + 1..head_size {
            raw.push((i, j));
        }
    }
    for l in 0..n_legs {
        let mut prev = l;
        for s in 0..leg_length {
            let node = head_size + l * leg_length + s;
            raw.push((prev, node));
            prev = node;
        }
    }

    let mut is_byz = vec![false; total];
    for &b in byz_placement {
        if b >= total {
            return Err(Error::InvalidParameter(format!(
                "Byzantine placement {b} out of range for {total} nodes"
            )));
        }
        if is_byz[b] {
            return Err(Error::InvalidParameter(format!("Byzantine placement {b} repeated")));
        }
        is_byz[b] = true;
    }
    let n_byz = byz_placement.len();
    if n_byz == total {
        return Err(Error::InvalidParameter("at least one honest worker is required".into()));
    }
    let mut label = vec![0; total];
    let mut next = 0;
    for (node, slot) in label.iter_mut().enumerate() {
        if !is_byz[node] {
            *slot = next;
            next += 1;
        }
    }
    for (k, &b) in byz_placement.iter().enumerate() {
        label[b] = total - n_byz + k;
    }
    let edges: Vec<_> = raw.into_iter().map(|(i, j)| (label[i], label[j])).collect();
    Topology::from_edges(total - n_byz, n_byz, &edges)
}

/// Square row-stochastic matrix of nonnegative weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    size: usize,
    weights: Vec<f64>,
}

impl MixingMatrix {
    /// Validates entries in `[0, 1]` and unit row sums (within
    /// [`STOCHASTIC_TOL`]).
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != size * size {
            return Err(Error::DimensionMismatch {
                expected: size * size,
                found: weights.len(),
            });
        }
        if size == 0 {
            return Err(Error::EmptyInput);
        }
        for (idx, &w) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidParameter(format!(
                    "weight {w} at ({}, {}) outside [0, 1]",
                    idx / size,
                    idx % size
                )));
            }
        }
        let m = Self { size, weights };
        for row in 0..size {
            let sum: f64 = m.row(row).iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotRowStochastic { row, sum });
            }
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        let mut weights = Vec::with_capacity(size * size);
        for r in rows {
            if r.len() != size {
                return Err(Error::DimensionMismatch {
                    expected: size,
                    found: r.len(),
                });
            }
            weights.extend_from_slice(r);
        }
        Self::new(size, weights)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.size..(row + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.size)
            .map(|c| (0..self.size).map(|r| self.get(r, c)).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry(tol).is_none()
    }

    fn asymmetry(&self, tol: f64) -> Option<(usize, usize)> {
        for i in 0..self.size {
            for j in i + 1..self.size {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        let rows_ok = (0..self.size).all(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs() <= tol);
        rows_ok && self.column_sums().iter().all(|c| (c - 1.0).abs() <= tol)
    }

    /// Leading `n × n` block, without renormalisation. Not necessarily row
    /// stochastic, hence returned as raw rows.
    pub fn leading_block(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n.min(self.size)).map(|r| self.row(r)[..n.min(self.size)].to_vec()).collect()
    }
}

/// Metropolis-Hastings weights: `w_nm = min(1/(deg_n+1), 1/(deg_m+1))` on
/// edges, the diagonal absorbs the rest of each row.
pub fn metropolis_weights(t: &Topology) -> MixingMatrix {
    let s = t.size();
    let deg: Vec<usize> = (0..s).map(|i| t.degree(i)).collect();
    let mut w = vec![0.0; s * s];
    for i in 0..s {
        let mut off = 0.0;
        for j in 0..s {
            if i != j && t.has_edge(i, j) {
                let v = (1.0 / (deg[i] + 1) as f64).min(1.0 / (deg[j] + 1) as f64);
                w[i * s + j] = v;
                off += v;
            }
        }
        w[i * s + i] = 1.0 - off;
    }
    MixingMatrix { size: s, weights: w }
}

/// Equal weights `1/(deg_n + 1)` over each worker's closed neighborhood.
/// Row stochastic, generally not column stochastic.
pub fn uniform_weights(t: &Topology) -> MixingMatrix {
    let s = t.size();
    let mut w = vec![0.0; s * s];
    for i in 0..s {
        let v = 1.0 / (t.degree(i) + 1) as f64;
        for j in 0..s {
            if i == j || t.has_edge(i, j) {
                w[i * s + j] = v;
            }
        }
    }
    MixingMatrix { size: s, weights: w }
}

/// Result of [`spectral_gap`]: `lambda = 1 - ‖(I - 11ᵀ/N) W‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGap {
    pub lambda: f64,
    /// False when `lambda <= 0`, i.e. the virtual graph cannot reach
    /// consensus. Reported, never raised.
    pub connected: bool,
}

pub fn spectral_gap(w: &MixingMatrix) -> SpectralGap {
    let n = w.size();
    // (I - 11ᵀ/N) W subtracts each column's mean from that column.
    let col_mean: Vec<f64> = w.column_sums().into_iter().map(|s| s / n as f64).collect();
    let centered: Vec<f64> = (0..n * n).map(|idx| w.as_slice()[idx] - col_mean[idx % n]).collect();
    let sigma_sq = linalg::largest_eigenvalue_psd(&linalg::gram(&centered, n), n);
    let lambda = 1.0 - sigma_sq;
    SpectralGap {
        lambda,
        connected: lambda > STOCHASTIC_TOL,
    }
}

/// `(1/N) Σ_m (column_sum_m - 1)²`.
pub fn chi_squared(w: &MixingMatrix) -> f64 {
    let n = w.size() as f64;
    w.column_sums().iter().map(|c| (c - 1.0).powi(2)).sum::<f64>() / n
}

/// Virtual mixing matrix of IOS: the honest block of `wprime`, with each
/// honest worker's Byzantine weights folded onto its diagonal.
pub fn ios_virtual_matrix(wprime: &MixingMatrix, t: &Topology) -> Result<MixingMatrix> {
    if wprime.size() != t.size() {
        return Err(Error::DimensionMismatch {
            expected: t.size(),
            found: wprime.size(),
        });
    }
    if let Some((row, col)) = wprime.asymmetry(STOCHASTIC_TOL) {
        return Err(Error::NotSymmetric { row, col });
    }
    let n = t.n_honest();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n..(i + 1) * n].copy_from_slice(&wprime.row(i)[..n]);
        let byz: f64 = t.byzantine_ids().map(|b| wprime.get(i, b)).sum();
        w[i * n + i] += byz;
    }
    MixingMatrix::new(n, w)
}

/// JSON document for a topology and, optionally, its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n_honest: usize,
    pub n_byzantine: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl GraphDocument {
    pub fn new(t: &Topology, w: Option<&MixingMatrix>) -> Self {
        Self {
            n_honest: t.n_honest(),
            n_byzantine: t.n_byzantine(),
            edges: t.edges(),
            weights: w.map(|m| m.as_slice().to_vec()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn topology(&self) -> Result<Topology> {
        let edges: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Topology::from_edges(self.n_honest, self.n_byzantine, &edges)
    }

    pub fn mixing_matrix(&self) -> Result<Option<MixingMatrix>> {
        self.weights
            .as_ref()
            .map(|w| MixingMatrix::new(self.n_honest + self.n_byzantine, w.clone()))
            .transpose()
    }
}


#[cfg(test)]
mod dense_oracle {
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn spectral_gap_matches_dense_svd(n in 2..=20usize, raw in prop::collection::vec(0.0..1.0f64, 400), sparsity in 0.0..0.8f64) {
            let mut rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| {
                    let v = raw[i * 20 + j];
                    if i != j && v < sparsity { 0.0 } else { v }
                }).collect())
                .collect();
            for row in rows.iter_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let w = MixingMatrix::from_rows(&rows).unwrap();
            let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
            let centered = (DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64)) * m;
            let sigma = centered.singular_values().max();
            prop_assert!((spectral_gap(&w).lambda - (1.0 - sigma * sigma)).abs() <= 1e-8);
        }
    }

    #[test]
    fn spectral_gap_matches_symmetric_eigen_on_metropolis() {
        for seed in 0..50 {
            let t = gen_erdos_renyi(5 + (seed as usize % 16), 0, 0.5, seed).unwrap();
            let w = metropolis_weights(&t);
            let n = w.size();
            let m = DMatrix::from_fn(n, n, |i, j| w.get(i, j));
            // Symmetric and doubly stochastic: the gap is 1 minus the second
            // largest squared eigenvalue magnitude.
            let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().map(|e| e * e).collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let want = 1.0 - eig[1];
            assert!((spectral_gap(&w).lambda - want).abs() <= 1e-8, "seed {seed}");
        }
    }
}
