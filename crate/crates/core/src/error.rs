use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the audit toolkit.
///
/// Variants are grouped by the exit status a front end should map them to:
/// configuration problems, data problems, and numerical failures.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{skipped} of {total} records in {path} are malformed; wrong schema?")]
    MostlyMalformed {
        path: PathBuf,
        skipped: usize,
        total: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no matched context survived the filters")]
    NoMatchedContext,

    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),

    #[error("optimizer did not converge after {iterations} iterations (objective {objective:.6e}, gradient max-norm {gradient_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        gradient_norm: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AuditError {
    /// Process exit status for this error: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuditError::Config(_) => 1,
            AuditError::NonConvergence { .. } | AuditError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
