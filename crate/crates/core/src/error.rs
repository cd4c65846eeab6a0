use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("negative variance in covariance: {0}")]
    NegativeVariance(f64),

    #[error("covariance is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("state is not realizable: {0}")]
    NotRealizable(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constraint violated at entry: {0}")]
    Constraint(String),

    #[error("non-finite value at step {step}")]
    NonFinite { step: u64 },

    #[error("no solution found: {0}")]
    NoSolution(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
