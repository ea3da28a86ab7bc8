//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A root-finding bracket does not contain a sign change.
    #[error("bracketing error: {0}")]
    Bracketing(String),

    /// Shapes of two inputs do not agree.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A model or parameter object violates one of its invariants.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An iterative method exhausted its iteration budget.
    #[error("no convergence: {context} (residual {residual:.3e} after {iterations} iterations)")]
    NonConvergence {
        context: &'static str,
        residual: f64,
        iterations: usize,
    },

    /// Not enough data to compute the requested quantity.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
