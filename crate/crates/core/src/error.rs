use thiserror::Error;

use crate::qp::QpStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rank deficient: {0}")]
    Rank(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    Definiteness(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),
    #[error("invalid bounds: {0}")]
    Bounds(String),
    #[error("numerical integrity violated: {0}")]
    NumericalIntegrity(String),
    #[error("noise calibration failed: {0}")]
    Calibration(String),
    #[error("solver did not reach optimality (status {status:?}) after {iterations} iterations")]
    Solver { status: QpStatus, iterations: usize },
    #[error("{0}")]
    Experiment(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
}
