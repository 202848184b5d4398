use thiserror::Error;

/// Errors produced by the solvers and the data plumbing around them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("no convergence after {iterations} iterations (last gradient norm {grad_norm:e})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("iterates diverged at step {step}: |beta|_inf = {norm:e}")]
    Divergence { step: usize, norm: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
