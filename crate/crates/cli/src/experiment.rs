//! Sweeps a validated experiment and writes traces, summaries and the
//! manifest.
//!
//! Layout of the output directory:
//!
//! - `traces/<aggregator>__<attack>__seed<k>.csv`, one per run
//! - `runs/<same stem>.json`, final metrics and wall time per run
//! - `summary.csv` and `summary.json`, means over seeds per grid cell
//! - `graph.json`, the topology and `W′`
//! - `manifest.json`, the resolved config and an index of everything above

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use byzmesh_core::graph::GraphDocument;
use byzmesh_core::problems::data::{load_mnist, partition, synthetic_clusters, SyntheticSpec};
use byzmesh_core::rng::{stream, Purpose};
use byzmesh_core::trainer::{fmt_float, run, trace_csv, write_atomic, TRACE_HEADER};
use byzmesh_core::{MetricsRecord, Problem, QuadraticProblem, RunConfig, SoftmaxProblem};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, ProblemConfig};

/// One cell of the sweep grid for one seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPlan {
    pub aggregator: usize,
    pub attack: usize,
    pub seed: u64,
    /// File stem shared by the trace and the per-run summary.
    pub stem: String,
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Aggregator-major, then attack, then seed.
pub fn plan(exp: &Experiment) -> Vec<RunPlan> {
    let mut out = Vec::new();
    for (i, agg) in exp.aggregators.iter().enumerate() {
        for (j, attack) in exp.attacks.iter().enumerate() {
            for &seed in &exp.config.run.seeds {
                out.push(RunPlan {
                    aggregator: i,
                    attack: j,
                    seed,
                    stem: format!("{}__{}__seed{seed}", file_safe(&agg.to_string()), file_safe(&attack.to_string())),
                });
            }
        }
    }
    out
}

pub fn build_problem(exp: &Experiment) -> anyhow::Result<Box<dyn Problem>> {
    let n = exp.topology.n_honest();
    let part = &exp.config.partition;
    Ok(match &exp.config.problem {
        ProblemConfig::Quadratic {
            dim,
            noise_std,
            targets,
            target_range,
            target_seed,
        } => {
            let z = match targets {
                Some(z) => z.clone(),
                None => {
                    let mut rng = stream(*target_seed, Purpose::Data, &[]);
                    (0..n)
                        .map(|_| (0..*dim).map(|_| target_range * (2.0 * rng.random::<f64>() - 1.0)).collect())
                        .collect()
                }
            };
            Box::new(QuadraticProblem::new(z, *noise_std)?)
        }
        ProblemConfig::SyntheticSoftmax {
            classes,
            features,
            samples_per_class,
            spread,
            seed,
            l2,
        } => {
            let data = synthetic_clusters(&SyntheticSpec {
                classes: *classes,
                features: *features,
                samples_per_class: *samples_per_class,
                spread: *spread,
                seed: *seed,
            })?;
            let shards = partition(&data, n, part.mode, part.seed)?;
            Box::new(SoftmaxProblem::new(Arc::new(data), shards, None, *l2)?)
        }
        ProblemConfig::Mnist { dir, l2 } => {
            let dir = dir.as_deref().context("MNIST directory unresolved")?;
            let (train, test) =
                load_mnist(dir).with_context(|| format!("loading MNIST from {}", dir.display()))?;
            let shards = partition(&train, n, part.mode, part.seed)?;
            Box::new(SoftmaxProblem::new(Arc::new(train), shards, Some(Arc::new(test)), *l2)?)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub trace: String,
    #[serde(flatten)]
    pub last: MetricsRecord,
    pub wall_time_secs: f64,
}

/// Final metrics of one grid cell, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub aggregator: String,
    pub attack: String,
    pub accuracy: Option<f64>,
    #[serde(rename = "H")]
    pub h: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub seeds: Vec<SeedResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

impl SummaryRow {
    fn new(aggregator: String, attack: String, seeds: Vec<SeedResult>) -> Self {
        let accuracy = seeds
            .iter()
            .map(|s| s.last.accuracy)
            .collect::<Option<Vec<f64>>>()
            .map(|a| mean(a.into_iter()));
        Self {
            aggregator,
            attack,
            accuracy,
            h: mean(seeds.iter().map(|s| s.last.h)),
            loss: mean(seeds.iter().map(|s| s.last.loss)),
            grad_norm_sq: mean(seeds.iter().map(|s| s.last.grad_norm_sq)),
            seeds,
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const SUMMARY_HEADER: &str = "aggregator,attack,seeds,accuracy,H,loss,grad_norm_sq";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.aggregator),
            csv_field(&r.attack),
            r.seeds.len(),
            r.accuracy.map(fmt_float).unwrap_or_default(),
            fmt_float(r.h),
            fmt_float(r.loss),
            fmt_float(r.grad_norm_sq),
        ));
    }
    out
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    aggregator: &'a str,
    attack: &'a str,
    seed: u64,
    trace: String,
    summary: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a crate::config::ExperimentConfig,
    n_honest: usize,
    n_byzantine: usize,
    graph: &'a str,
    trace_columns: Vec<&'a str>,
    summary_csv: &'a str,
    summary_json: &'a str,
    runs: Vec<ManifestRun<'a>>,
}

#[derive(Serialize)]
struct RunFile<'a> {
    aggregator: &'a str,
    attack: &'a str,
    seed: u64,
    trace: &'a str,
    final_metrics: &'a MetricsRecord,
    records: usize,
    wall_time_secs: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Outcome of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub out_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

/// Runs every grid cell and seed in `exp`, writing into `out_dir`.
/// `threads` bounds the worker pool; results do not depend on it.
pub fn run_experiment(exp: &Experiment, out_dir: &Path, threads: Option<usize>) -> anyhow::Result<SweepOutput> {
    let problem = build_problem(exp)?;
    let plans = plan(exp);
    let run_cfg = &exp.config.run;
    let dim = problem.dim();

    let one = |p: &RunPlan| -> anyhow::Result<SeedResult> {
        let agg = &exp.aggregators[p.aggregator];
        let attack = &exp.attacks[p.attack];
        let mut cfg = RunConfig::new(
            exp.topology.clone(),
            exp.weights.clone(),
            agg.clone(),
            attack.clone(),
            run_cfg.step_size.into(),
            run_cfg.steps,
            vec![run_cfg.x0; dim],
            p.seed,
        );
        cfg.batch = run_cfg.batch;
        cfg.record_every = exp.record_every();
        let result = run(&cfg, problem.as_ref())?;
        let trace = format!("traces/{}.csv", p.stem);
        write_atomic(&out_dir.join(&trace), trace_csv(&result.records).as_bytes())?;
        let last = result.last().clone();
        write_json(
            &out_dir.join(format!("runs/{}.json", p.stem)),
            &RunFile {
                aggregator: &exp.config.sweep.aggregators[p.aggregator],
                attack: &exp.config.sweep.attacks[p.attack],
                seed: p.seed,
                trace: &trace,
                final_metrics: &last,
                records: result.records.len(),
                wall_time_secs: result.wall_time_secs,
            },
        )?;
        Ok(SeedResult {
            seed: p.seed,
            trace,
            last,
            wall_time_secs: result.wall_time_secs,
        })
    };
    let sweep = || -> anyhow::Result<Vec<SeedResult>> {
        plans
            .par_iter()
            .map(|p| one(p).with_context(|| format!("run {} failed", p.stem)))
            .collect()
    };
    let results = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .context("building the thread pool")?
            .install(sweep)?,
        None => sweep()?,
    };

    let n_seeds = run_cfg.seeds.len();
    let rows: Vec<SummaryRow> = results
        .chunks(n_seeds)
        .zip(plans.chunks(n_seeds))
        .map(|(res, ps)| {
            SummaryRow::new(
                exp.config.sweep.aggregators[ps[0].aggregator].clone(),
                exp.config.sweep.attacks[ps[0].attack].clone(),
                res.to_vec(),
            )
        })
        .collect();

    write_atomic(&out_dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    write_json(&out_dir.join("summary.json"), &rows)?;
    let graph = GraphDocument::new(&exp.topology, Some(&exp.weights)).to_json()?;
    write_atomic(&out_dir.join("graph.json"), graph.as_bytes())?;
    let manifest = Manifest {
        config: &exp.config,
        n_honest: exp.topology.n_honest(),
        n_byzantine: exp.topology.n_byzantine(),
        graph: "graph.json",
        trace_columns: TRACE_HEADER.split(',').collect(),
        summary_csv: "summary.csv",
        summary_json: "summary.json",
        runs: plans
            .iter()
            .map(|p| ManifestRun {
                aggregator: &exp.config.sweep.aggregators[p.aggregator],
                attack: &exp.config.sweep.attacks[p.attack],
                seed: p.seed,
                trace: format!("traces/{}.csv", p.stem),
                summary: format!("runs/{}.json", p.stem),
            })
            .collect(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(SweepOutput {
        out_dir: out_dir.to_path_buf(),
        rows,
    })
}
