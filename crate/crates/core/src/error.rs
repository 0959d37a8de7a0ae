use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("{rule} needs more than {needed} inputs, got {got}")]
    InsufficientInputs {
        rule: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("{0} requires mixing weights")]
    MissingWeights(&'static str),

    #[error("worker {0} is not in the weight map")]
    UnknownWorker(usize),

    #[error("mixing matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("row {row} sums to {sum}, expected 1")]
    NotRowStochastic { row: usize, sum: f64 },

    #[error("worker {0} has no honest neighbors")]
    NoHonestNeighbors(usize),

    #[error("worker {0} has no Byzantine weight mass")]
    NoByzantineWeight(usize),

    #[error("non-finite model value at step {step} (worker {worker})")]
    NonFinite { step: usize, worker: usize },

    #[error("iteration did not converge after {0} steps")]
    NoConvergence(usize),

    #[error("malformed IDX data: {0}")]
    Idx(String),

    #[error("cannot parse `{input}`: {reason}")]
    Parse { input: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(input: &str, reason: impl Into<String>) -> Self {
        Error::Parse {
            input: input.to_string(),
            reason: reason.into(),
        }
    }
}
