//! Experiment documents: parsing, defaults and validation.
//!
//! A config is one TOML document with a section per sweep axis:
//!
//! ```toml
//! [graph]
//! kind = "two_castle"
//! castle_size = 5
//! byzantine_per_castle = 1
//!
//! [sweep]
//! aggregators = ["ios:q=auto", "coomed"]
//! attacks = ["signflip"]
//!
//! [problem]
//! kind = "quadratic"
//! dim = 2
//!
//! [run]
//! steps = 100
//! step_size = { schedule = "constant", value = 0.05 }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use byzmesh_core::graph::{
    gen_erdos_renyi, gen_octopus, gen_two_castle, metropolis_weights, uniform_weights, GraphDocument,
};
use byzmesh_core::problems::PartitionMode;
use byzmesh_core::{AggregatorSpec, AttackSpec, MixingMatrix, StepSize, Topology};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "BYZMESH_DATA_DIR";

/// A problem with the config itself, located by line or by field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at {}: {}", self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphConfig,
    #[serde(default)]
    pub weights: WeightsConfig,
    pub sweep: SweepConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphConfig {
    TwoCastle {
        castle_size: usize,
        byzantine_per_castle: usize,
    },
    ErdosRenyi {
        honest: usize,
        byzantine: usize,
        p: f64,
        #[serde(default)]
        seed: u64,
    },
    Octopus {
        head_size: usize,
        legs: usize,
        leg_length: usize,
        /// Original node ids turned Byzantine.
        #[serde(default)]
        byzantine: Vec<usize>,
    },
    /// A graph document as written by `GraphDocument::to_json`.
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    #[default]
    Metropolis,
    Uniform,
    /// Weights stored in the graph file.
    File,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(default)]
    pub rule: WeightRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub aggregators: Vec<String>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<String>,
}

fn default_attacks() -> Vec<String> {
    vec!["none".into()]
}

fn default_l2() -> f64 {
    byzmesh_core::SoftmaxProblem::DEFAULT_L2
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `f_n(x) = ½‖x − z_n‖²` with Gaussian gradient noise.
    Quadratic {
        dim: usize,
        #[serde(default)]
        noise_std: f64,
        /// Explicit targets, one per honest worker. Drawn uniformly from
        /// `[−target_range, target_range]^dim` when absent.
        #[serde(default)]
        targets: Option<Vec<Vec<f64>>>,
        #[serde(default = "one")]
        target_range: f64,
        #[serde(default)]
        target_seed: u64,
    },
    SyntheticSoftmax {
        classes: usize,
        features: usize,
        samples_per_class: usize,
        #[serde(default = "one")]
        spread: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_l2")]
        l2: f64,
    },
    Mnist {
        /// Directory holding the four IDX files; falls back to
        /// `BYZMESH_DATA_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_l2")]
        l2: f64,
    },
}

impl ProblemConfig {
    fn default_record_every(&self) -> usize {
        match self {
            ProblemConfig::Quadratic { .. } => 1,
            _ => 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_mode")]
    pub mode: PartitionMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> PartitionMode {
    PartitionMode::Iid
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSizeConfig {
    Constant { value: f64 },
    /// `scale / √(k + 1)`.
    InvSqrt { scale: f64 },
}

impl From<StepSizeConfig> for StepSize {
    fn from(s: StepSizeConfig) -> Self {
        match s {
            StepSizeConfig::Constant { value } => StepSize::Constant(value),
            StepSizeConfig::InvSqrt { scale } => StepSize::InvSqrt(scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub step_size: StepSizeConfig,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Defaults to 1 for quadratics and 50 for softmax problems.
    #[serde(default)]
    pub record_every: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Every coordinate of the shared starting model.
    #[serde(default)]
    pub x0: f64,
}

fn default_batch() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// A validated config with its sweep axes parsed and the graph built.
#[derive(Clone, Debug)]
pub struct Experiment {
    /// The config with every default filled in; echoed into the manifest.
    pub config: ExperimentConfig,
    pub aggregators: Vec<AggregatorSpec>,
    pub attacks: Vec<AttackSpec>,
    pub topology: Topology,
    pub weights: MixingMatrix,
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses a TOML document. Relative paths inside it resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let location = e.span().map_or("document".to_string(), |s| format!("line {}", line_of(text, s.start)));
        ConfigError::new(location, e.message().trim().to_string())
    })?;
    if let GraphConfig::File { path } = &mut cfg.graph {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    if let ProblemConfig::Mnist { dir, .. } = &mut cfg.problem {
        if let Some(d) = dir.as_mut().filter(|d| d.is_relative()) {
            *d = base.join(&*d);
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(path.display().to_string(), format!("cannot read config: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_config(&text, base)?)
}

fn build_graph(cfg: &ExperimentConfig) -> Result<(Topology, MixingMatrix), ConfigError> {
    let err = |e: byzmesh_core::Error| ConfigError::new("graph", e.to_string());
    let mut stored = None;
    let topology = match &cfg.graph {
        GraphConfig::TwoCastle {
            castle_size,
            byzantine_per_castle,
        } => gen_two_castle(*castle_size, *byzantine_per_castle).map_err(err)?,
        GraphConfig::ErdosRenyi {
            honest,
            byzantine,
            p,
            seed,
        } => gen_erdos_renyi(*honest, *byzantine, *p, *seed).map_err(err)?,
        GraphConfig::Octopus {
            head_size,
            legs,
            leg_length,
            byzantine,
        } => gen_octopus(*head_size, *legs, *leg_length, byzantine).map_err(err)?,
        GraphConfig::File { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("graph.path", format!("cannot read {}: {e}", path.display())))?;
            let doc = GraphDocument::from_json(&text).map_err(|e| ConfigError::new("graph.path", e.to_string()))?;
            stored = doc.mixing_matrix().map_err(|e| ConfigError::new("graph.path", e.to_string()))?;
            doc.topology().map_err(|e| ConfigError::new("graph.path", e.to_string()))?
        }
    };
    let weights = match cfg.weights.rule {
        WeightRule::Metropolis => metropolis_weights(&topology),
        WeightRule::Uniform => uniform_weights(&topology),
        WeightRule::File => stored.ok_or_else(|| {
            ConfigError::new("weights.rule", "`file` needs a graph file that stores weights")
        })?,
    };
    Ok((topology, weights))
}

fn parse_axis<T: std::str::FromStr<Err = byzmesh_core::Error> + fmt::Display>(
    items: &[String],
    field: &str,
    what: &str,
) -> Result<Vec<T>, ConfigError> {
    if items.is_empty() {
        return Err(ConfigError::new(field, format!("list at least one {what}")));
    }
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for (i, s) in items.iter().enumerate() {
        let spec: T = s.parse().map_err(|e: byzmesh_core::Error| ConfigError::new(format!("{field}[{i}]"), e.to_string()))?;
        let label = spec.to_string();
        if out.iter().any(|o| o.to_string() == label) {
            return Err(ConfigError::new(format!("{field}[{i}]"), format!("`{label}` is listed twice")));
        }
        out.push(spec);
    }
    Ok(out)
}

fn check_problem(problem: &mut ProblemConfig, n_honest: usize) -> Result<(), ConfigError> {
    match problem {
        ProblemConfig::Quadratic {
            dim,
            noise_std,
            targets,
            target_range,
            ..
        } => {
            if *dim == 0 {
                return Err(ConfigError::new("problem.dim", "must be at least 1"));
            }
            if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                return Err(ConfigError::new("problem.noise_std", "must be finite and non-negative"));
            }
            if !(*target_range >= 0.0 && target_range.is_finite()) {
                return Err(ConfigError::new("problem.target_range", "must be finite and non-negative"));
            }
            if let Some(z) = targets {
                if z.len() != n_honest {
                    return Err(ConfigError::new(
                        "problem.targets",
                        format!("{} targets for {n_honest} honest workers", z.len()),
                    ));
                }
                if let Some(i) = z.iter().position(|t| t.len() != *dim) {
                    return Err(ConfigError::new(format!("problem.targets[{i}]"), format!("expected {dim} values")));
                }
            }
        }
        ProblemConfig::SyntheticSoftmax {
            classes,
            features,
            samples_per_class,
            spread,
            l2,
            ..
        } => {
            if *classes < 2 {
                return Err(ConfigError::new("problem.classes", "need at least 2 classes"));
            }
            if *features == 0 || *samples_per_class == 0 {
                return Err(ConfigError::new("problem", "features and samples_per_class must be positive"));
            }
            if !(*spread >= 0.0) {
                return Err(ConfigError::new("problem.spread", "must be non-negative"));
            }
            if !(*l2 >= 0.0) {
                return Err(ConfigError::new("problem.l2", "must be non-negative"));
            }
        }
        ProblemConfig::Mnist { dir, l2 } => {
            if dir.is_none() {
                *dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
            }
            if dir.is_none() {
                return Err(ConfigError::new(
                    "problem.dir",
                    format!("no MNIST directory given and {DATA_DIR_ENV} is not set"),
                ));
            }
            if !(*l2 >= 0.0) {
                return Err(ConfigError::new("problem.l2", "must be non-negative"));
            }
        }
    }
    Ok(())
}

fn check_run(run: &mut RunSection, problem: &ProblemConfig) -> Result<(), ConfigError> {
    if run.steps == 0 {
        return Err(ConfigError::new("run.steps", "must be at least 1"));
    }
    let v = match run.step_size {
        StepSizeConfig::Constant { value } => value,
        StepSizeConfig::InvSqrt { scale } => scale,
    };
    if !(v > 0.0 && v.is_finite()) {
        return Err(ConfigError::new("run.step_size", "must be positive and finite"));
    }
    if run.batch == 0 {
        return Err(ConfigError::new("run.batch", "must be at least 1"));
    }
    if run.seeds.is_empty() {
        return Err(ConfigError::new("run.seeds", "list at least one seed"));
    }
    if let Some(i) = (1..run.seeds.len()).find(|&i| run.seeds[..i].contains(&run.seeds[i])) {
        return Err(ConfigError::new(format!("run.seeds[{i}]"), "seed listed twice"));
    }
    if !run.x0.is_finite() {
        return Err(ConfigError::new("run.x0", "must be finite"));
    }
    let every = *run.record_every.get_or_insert(problem.default_record_every());
    if every == 0 {
        return Err(ConfigError::new("run.record_every", "must be at least 1"));
    }
    Ok(())
}

impl Experiment {
    /// Validates `config`, fills its defaults and builds the graph.
    pub fn resolve(mut config: ExperimentConfig) -> Result<Self, ConfigError> {
        let (topology, weights) = build_graph(&config)?;
        let aggregators: Vec<AggregatorSpec> = parse_axis(&config.sweep.aggregators, "sweep.aggregators", "aggregator")?;
        let attacks: Vec<AttackSpec> = parse_axis(&config.sweep.attacks, "sweep.attacks", "attack")?;
        for (i, rule) in aggregators.iter().enumerate() {
            for n in topology.honest_ids() {
                rule.validate_for(topology.degree(n), topology.byzantine_neighbors(n).len())
                    .map_err(|e| ConfigError::new(format!("sweep.aggregators[{i}]"), format!("worker {n}: {e}")))?;
            }
        }
        check_problem(&mut config.problem, topology.n_honest())?;
        check_run(&mut config.run, &config.problem)?;
        for (i, s) in aggregators.iter().enumerate() {
            config.sweep.aggregators[i] = s.to_string();
        }
        for (i, s) in attacks.iter().enumerate() {
            config.sweep.attacks[i] = s.to_string();
        }
        Ok(Self {
            config,
            aggregators,
            attacks,
            topology,
            weights,
        })
    }

    pub fn record_every(&self) -> usize {
        self.config.run.record_every.unwrap_or(1)
    }
}
