//! Simulator and analysis toolkit for Byzantine-resilient decentralized SGD.
//!
//! The crate is organised the way a run is assembled:
//!
//! - [`graph`] builds worker topologies and mixing matrices, and measures
//!   their spectral gap and how far they are from doubly stochastic.
//! - [`aggregation`] holds the robust aggregation rules, including the
//!   iterative outlier scissor ([`aggregation::ios`]).
//! - [`attacks`] crafts the messages Byzantine workers send.
//! - [`problems`] supplies local cost functions, gradient oracles and data.
//! - [`trainer`] runs decentralized SGD and records metrics.
//! - [`analysis`] checks contraction, consensus and convergence bounds
//!   against measured runs.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod analysis;
pub mod attacks;
pub mod error;
pub mod graph;
mod linalg;
pub mod problems;
pub mod rng;
pub mod trainer;

pub use aggregation::{AggregationInput, AggregatorSpec, Message, NeighborWeights, QEstimate};
pub use attacks::AttackSpec;
pub use error::{Error, Result};
pub use graph::{MixingMatrix, Topology};
pub use problems::{Problem, QuadraticProblem, SoftmaxProblem};
pub use trainer::{MetricsRecord, ModelState, RunConfig, RunResult, StepSize};
