use thiserror::Error;

use crate::olive::OliveTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model, table or policy failed structural validation.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported request: {0}")]
    Unsupported(String),

    /// A version space emptied out, which can only happen when the
    /// realizability or completeness assumptions are broken (or thresholds
    /// are misconfigured).
    #[error("assumption violation: {0}")]
    AssumptionViolation(String),

    #[error("iteration cap of {cap} exceeded")]
    CapExceeded { cap: usize, trace: Box<OliveTrace> },

    #[error("instance generator gave up: {0}")]
    Generator(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
