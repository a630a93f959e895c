//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: String, actual: String },

    #[error("annotation {id} out of bounds: {reason}")]
    OutOfBounds { id: String, reason: String },

    #[error("annotation {0} is missing a score for axis {1}")]
    MissingAxisScore(String, String),

    #[error("histogram spec does not match the model spec")]
    SpecMismatch,

    #[error("model has zero density in occupied bins {bins:?}")]
    SupportViolation { bins: Vec<usize> },

    #[error("EM did not converge after {iterations} iterations (last objective {last_objective})")]
    NotConverged { iterations: usize, last_objective: f64, last_q: Vec<f64>, trace: Vec<f64> },

    #[error("singular curvature at the fitted quantities: {0}; try fewer components")]
    SingularCurvature(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
