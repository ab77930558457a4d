use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the crate.
///
/// Variants are grouped by who is at fault: `Config` for bad parameters,
/// `Ingestion` for malformed input files, `Shape`/`Contract`/`Usage` for
/// callers violating an operation's preconditions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("unknown sample id {0}")]
    UnknownId(usize),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by the data handed in rather than by the
    /// configuration or by a runtime failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Ingestion { .. } | Error::Format { .. } | Error::Shape { .. } | Error::UnknownId(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
