//! Byzantine-resilient decentralized SGD.
//!
//! Each step is a barrier: every honest worker first takes a local
//! stochastic gradient step, then Byzantine workers craft their messages
//! from those half-step models, then every honest worker aggregates. Work
//! inside a phase runs in parallel; all randomness comes from streams keyed
//! by `(seed, step, worker)`, so results do not depend on the thread count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationInput, AggregatorSpec, Message, NeighborWeights, RoundInfo};
use crate::attacks::{craft, AttackContext, AttackSpec};
use crate::error::{Error, Result};
use crate::graph::{gen_two_castle, metropolis_weights, MixingMatrix, Topology};
use crate::problems::{Problem, QuadraticProblem};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Constant(f64),
    /// `α^k = scale / √(k + 1)`.
    InvSqrt(f64),
}

impl StepSize {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSize::Constant(a) => a,
            StepSize::InvSqrt(scale) => scale / ((k + 1) as f64).sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            StepSize::Constant(a) => a,
            StepSize::InvSqrt(s) => s,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("step size {v} must be positive")))
        }
    }
}

/// Starting models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Every honest worker starts from the same `x⁰`.
    Shared(Vec<f64>),
    /// One starting model per honest worker (used by hand-built fixtures).
    PerWorker(Vec<Vec<f64>>),
}

/// Stacked honest models, one row per worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    rows: Vec<Vec<f64>>,
}

impl ModelState {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().ok_or(Error::EmptyInput)?.len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.len(),
            });
        }
        Ok(Self { rows })
    }

    pub fn n_workers(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.rows[n]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `x̄ = (1/N) Σ_n x_n`.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let mut acc = vec![0.0; self.dim()];
        for r in &self.rows {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// `Σ_n p_n x_n`.
    pub fn weighted_mean(&self, p: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for (r, w) in self.rows.iter().zip(p) {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += w * v;
            }
        }
        acc
    }
}

/// Disagreement `H = (1/N) Σ_n ‖x_n − x̄‖²`.
pub fn disagreement(x: &ModelState) -> f64 {
    let mean = x.mean();
    x.rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / x.n_workers() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(rename = "H")]
    pub h: f64,
    pub grad_norm_sq: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub topology: Topology,
    /// Full `W′` over honest and Byzantine workers.
    pub weights: MixingMatrix,
    /// One rule per honest worker.
    pub rules: Vec<AggregatorSpec>,
    pub attack: AttackSpec,
    pub step_size: StepSize,
    pub batch: usize,
    /// Number of steps `K`.
    pub steps: usize,
    pub init: Init,
    pub seed: u64,
    /// Metrics are recorded at step 0, every `record_every` steps, and at `K`.
    pub record_every: usize,
}

impl RunConfig {
    /// A config where every honest worker uses `rule`, with batch size 1 and
    /// metrics at every step.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topology: Topology,
        weights: MixingMatrix,
        rule: AggregatorSpec,
        attack: AttackSpec,
        step_size: StepSize,
        steps: usize,
        x0: Vec<f64>,
        seed: u64,
    ) -> Self {
        let rules = vec![rule; topology.n_honest()];
        Self {
            topology,
            weights,
            rules,
            attack,
            step_size,
            batch: 1,
            steps,
            init: Init::Shared(x0),
            seed,
            record_every: 1,
        }
    }

    fn initial_state(&self, n: usize) -> Result<ModelState> {
        match &self.init {
            Init::Shared(x0) => ModelState::new(vec![x0.clone(); n]),
            Init::PerWorker(rows) => {
                if rows.len() != n {
                    return Err(Error::InvalidParameter(format!(
                        "{} initial models for {n} honest workers",
                        rows.len()
                    )));
                }
                ModelState::new(rows.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub final_state: ModelState,
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("a run records at least step 0")
    }
}

struct WorkerView {
    weights: NeighborWeights,
    honest: Vec<usize>,
    byzantine: Vec<usize>,
}

fn prepare(cfg: &RunConfig, problem: &dyn Problem) -> Result<(Vec<WorkerView>, ModelState)> {
    let t = &cfg.topology;
    let w = &cfg.weights;
    let n = t.n_honest();
    if cfg.steps == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    if cfg.batch == 0 || cfg.record_every == 0 {
        return Err(Error::InvalidParameter("batch and record_every must be at least 1".into()));
    }
    cfg.step_size.validate()?;
    if w.size() != t.size() {
        return Err(Error::DimensionMismatch {
            expected: t.size(),
            found: w.size(),
        });
    }
    for i in 0..t.size() {
        for j in 0..t.size() {
            if i != j && !t.has_edge(i, j) && w.get(i, j) != 0.0 {
                return Err(Error::InvalidParameter(format!("weight on missing edge ({i}, {j})")));
            }
        }
    }
    if cfg.rules.len() != n {
        return Err(Error::InvalidParameter(format!("{} rules for {n} honest workers", cfg.rules.len())));
    }
    if problem.n_workers() != n {
        return Err(Error::InvalidParameter(format!(
            "problem has {} workers, topology has {n} honest workers",
            problem.n_workers()
        )));
    }
    let state = cfg.initial_state(n)?;
    if state.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            found: state.dim(),
        });
    }
    let views = (0..n)
        .map(|i| {
            let view = WorkerView {
                weights: NeighborWeights::from_matrix(w, t, i),
                honest: t.honest_neighbors(i),
                byzantine: t.byzantine_neighbors(i),
            };
            cfg.rules[i].validate_for(t.degree(i), view.byzantine.len())?;
            if !view.byzantine.is_empty() {
                if view.honest.is_empty() {
                    return Err(Error::NoHonestNeighbors(i));
                }
                let mass: f64 = view.byzantine.iter().map(|&b| w.get(i, b)).sum();
                if cfg.attack == AttackSpec::Isolation && !(mass > 0.0) {
                    return Err(Error::NoByzantineWeight(i));
                }
            }
            Ok(view)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((views, state))
}

fn record(step: usize, x: &ModelState, problem: &dyn Problem) -> MetricsRecord {
    let mean = x.mean();
    let g = problem.grad(&mean);
    let accuracy: Option<Vec<f64>> = x.rows.iter().map(|r| problem.accuracy(r)).collect();
    MetricsRecord {
        step,
        h: disagreement(x),
        grad_norm_sq: g.iter().map(|v| v * v).sum(),
        loss: problem.loss(&mean),
        accuracy: accuracy.map(|a| a.iter().sum::<f64>() / a.len() as f64),
    }
}

fn step_once(
    cfg: &RunConfig,
    problem: &dyn Problem,
    views: &[WorkerView],
    x: &ModelState,
    k: usize,
) -> Result<ModelState> {
    let alpha = cfg.step_size.at(k);
    let half: Vec<Vec<f64>> = (0..x.n_workers())
        .into_par_iter()
        .map(|n| {
            let mut rng = stream(cfg.seed, Purpose::Gradient, &[k as u64, n as u64]);
            let g = problem.stochastic_grad(n, x.row(n), cfg.batch, &mut rng)?;
            Ok(x.row(n).iter().zip(g).map(|(v, gv)| v - alpha * gv).collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..x.n_workers())
        .into_par_iter()
        .map(|n| {
            let view = &views[n];
            let honest: Vec<(usize, &[f64])> = view.honest.iter().map(|&m| (m, half[m].as_slice())).collect();
            let crafted: Vec<Vec<f64>> = if view.byzantine.is_empty() {
                Vec::new()
            } else {
                let ctx = AttackContext {
                    target: n,
                    own: &half[n],
                    honest: honest.clone(),
                    byzantine: view.byzantine.clone(),
                    weights: &view.weights,
                };
                view.byzantine
                    .iter()
                    .map(|&b| {
                        let mut rng = stream(cfg.seed, Purpose::Attack, &[k as u64, b as u64, n as u64]);
                        craft(&cfg.attack, &ctx, &mut rng)
                    })
                    .collect::<Result<_>>()?
            };
            let mut messages: Vec<Message> = honest.iter().map(|&(from, value)| Message { from, value }).collect();
            messages.extend(view.byzantine.iter().zip(&crafted).map(|(&from, v)| Message { from, value: v }));
            let input = AggregationInput::new(n, &half[n], messages).with_weights(&view.weights);
            let round = RoundInfo {
                alpha,
                byzantine_neighbors: view.byzantine.len(),
            };
            let out = aggregate(&cfg.rules[n], &input, round)?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: k + 1, worker: n });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ModelState { rows })
}

/// Runs decentralized SGD for `cfg.steps` steps.
pub fn run(cfg: &RunConfig, problem: &dyn Problem) -> Result<RunResult> {
    let start = Instant::now();
    let (views, mut x) = prepare(cfg, problem)?;
    let mut records = vec![record(0, &x, problem)];
    for k in 0..cfg.steps {
        x = step_once(cfg, problem, &views, &x, k)?;
        let step = k + 1;
        if step % cfg.record_every == 0 || step == cfg.steps {
            records.push(record(step, &x, problem));
        }
    }
    Ok(RunResult {
        records,
        final_state: x,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs `cfg` and returns the model state after every step, starting with
/// the initial state.
pub fn trajectory(cfg: &RunConfig, problem: &dyn Problem) -> Result<Vec<ModelState>> {
    let (views, x) = prepare(cfg, problem)?;
    let mut out = Vec::with_capacity(cfg.steps + 1);
    out.push(x);
    for k in 0..cfg.steps {
        let next = step_once(cfg, problem, &views, out.last().expect("non-empty"), k)?;
        out.push(next);
    }
    Ok(out)
}

pub const TRACE_HEADER: &str = "step,H,grad_norm_sq,loss,accuracy";

/// Formats a float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// The CSV trace: `step,H,grad_norm_sq,loss,accuracy`, accuracy left empty
/// when the problem has none.
pub fn trace_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let acc = r.accuracy.map(fmt_float).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            fmt_float(r.h),
            fmt_float(r.grad_norm_sq),
            fmt_float(r.loss),
            acc
        );
    }
    out
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Step size of [`two_castle_fixture`]. Small enough that the gradient pull
/// between the castles leaves WeiMean's steady-state disagreement far below
/// `1e-10`.
pub const TWO_CASTLE_ALPHA: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub rule: String,
    pub steps: usize,
    /// Every model bitwise equal to its starting value after every step.
    pub stationary: bool,
    pub h: Vec<f64>,
}

impl StationarityReport {
    /// First step at which `H` drops below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.h.iter().position(|&h| h < threshold)
    }
}

/// The six-worker two-castle setup: castle A holds `z1`, castle B holds
/// `z2`, each worker starts at its own target and runs the deterministic
/// gradient with `rule` and Metropolis weights.
pub fn two_castle_fixture(z1: f64, z2: f64, rule: &AggregatorSpec, steps: usize) -> Result<StationarityReport> {
    let t = gen_two_castle(3, 0)?;
    let w = metropolis_weights(&t);
    let targets: Vec<Vec<f64>> = (0..6).map(|n| vec![if n < 3 { z1 } else { z2 }]).collect();
    let problem = QuadraticProblem::new(targets.clone(), 0.0)?;
    let mut cfg = RunConfig::new(
        t,
        w,
        rule.clone(),
        AttackSpec::None,
        StepSize::Constant(TWO_CASTLE_ALPHA),
        steps,
        Vec::new(),
        0,
    );
    cfg.init = Init::PerWorker(targets.clone());
    let states = trajectory(&cfg, &problem)?;
    let stationary = states.iter().all(|s| {
        s.rows()
            .iter()
            .zip(&targets)
            .all(|(r, z)| r.iter().zip(z).all(|(a, b)| a.to_bits() == b.to_bits()))
    });
    Ok(StationarityReport {
        rule: rule.to_string(),
        steps,
        stationary,
        h: states.iter().map(disagreement).collect(),
    })
}
