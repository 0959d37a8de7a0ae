//! Experiment runner and bound-check driver behind the `byzmesh` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod experiment;

use config::ConfigError;

/// Exit status for a failed command: 2 when the config is at fault, 1 for
/// anything that went wrong while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else {
        1
    }
}
