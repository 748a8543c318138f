//! Command-line front end for `strata-core`.
//!
//! Four commands cover the full workflow:
//!
//! * `simulate` — draw event sequences from a saved model,
//! * `train` — fit a model to a dataset by Monte Carlo EM,
//! * `eval` — held-out log-likelihood per event of a saved model,
//! * `predict` — sequential next-event prediction and its metrics.
//!
//! File formats are JSON (models, architecture specs, run configs) and
//! JSON lines (datasets, training traces, prediction records); see
//! [`files`]. All commands are deterministic for a fixed `--seed`,
//! regardless of `--threads`, because parallel per-sequence work is
//! reduced in sequence order.
//!
//! Exit codes: 0 on success, 2 for usage/schema/IO problems, 3 when a
//! numeric computation diverged.

pub mod commands;
pub mod files;

use thiserror::Error;

/// Exit code for schema, validation, IO, and usage failures.
pub const EXIT_SCHEMA: i32 = 2;
/// Exit code for numeric divergence.
pub const EXIT_NUMERIC: i32 = 3;

/// Anything a command can fail with, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input: bad JSON, schema violations, impossible options,
    /// IO failures. Exit code 2.
    #[error("{0}")]
    Schema(String),
    /// A numeric computation left the trustworthy range. Exit code 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => EXIT_SCHEMA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Schema(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Schema(format!("json error: {e}"))
    }
}

impl From<strata_core::model::ModelError> for CliError {
    fn from(e: strata_core::model::ModelError) -> Self {
        CliError::Schema(format!("model error: {e}"))
    }
}

impl From<strata_core::mcem::FitError> for CliError {
    fn from(e: strata_core::mcem::FitError) -> Self {
        use strata_core::mcem::FitError;
        match e {
            FitError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}
