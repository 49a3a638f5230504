use thiserror::Error;

use crate::conic::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent matrix or vector dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value outside its mathematical domain (negative variance, bad scale exponent, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested combination of inputs is not supported by this operation.
    #[error("unsupported: {0}")]
    Capability(String),

    /// The conic backend did not return a certified optimum.
    #[error("solver returned {status:?}: {detail}")]
    Solver { status: SolveStatus, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: u64, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    /// True for errors that mark a skipped experiment cell rather than a failure.
    pub fn is_capability(&self) -> bool {
        matches!(self, Error::Capability(_))
    }
}
