use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite (after jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("loss must be a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("unknown parameter name `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{name}` declared as both {first} and {second}")]
    KindConflict {
        name: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("unsupported format version {found} (reader supports {supported})")]
    Version { found: String, supported: String },

    #[error("objective failed at iteration {iteration}: {msg}")]
    Objective { iteration: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Errors caused by bad user input rather than a failing computation.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::UnknownParameter(_)
                | Error::KindConflict { .. }
                | Error::Data { .. }
                | Error::Version { .. }
                | Error::Json(_)
                | Error::Toml(_)
                | Error::Csv(_)
        )
    }
}
