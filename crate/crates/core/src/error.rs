//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by schedule evaluation, oracles, solvers and I/O.
#[derive(Debug, Error)]
pub enum DfError {
    /// A time argument fell outside the schedule's `[t_min, t_max]` window.
    #[error("time {t} outside schedule range [{t_min}, {t_max}]")]
    TimeOutOfRange { t: f64, t_min: f64, t_max: f64 },

    /// Two operands disagree on dimension (state vs. dataset, vector vs. matrix, ...).
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A matrix that must be symmetric positive definite failed its Cholesky factorization.
    #[error("matrix is not symmetric positive definite: {context}")]
    NotSpd { context: &'static str },

    /// An iterate of a solver stopped being finite.
    #[error("non-finite value encountered at step {step} of {context}")]
    NonFinite { context: &'static str, step: usize },

    /// Invalid argument that is not a dimension problem (empty dataset, zero probes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A trajectory handed to a consumer does not match the expected time grid.
    #[error("trajectory grid mismatch: {0}")]
    GridMismatch(String),

    /// Training diverged or was misconfigured.
    #[error("training failed: {0}")]
    Training(String),

    /// Malformed dataset or checkpoint contents.
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, DfError>;
