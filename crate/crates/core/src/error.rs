use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed prompt at position {position}: {reason}")]
    Prompt { position: usize, reason: String },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape { what: String, expected: String, got: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{component} became non-finite at step {step}")]
    NonFinite { component: &'static str, step: u64 },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("unsupported file version: found {found}, expected {expected}")]
    Version { found: String, expected: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { what: what.into(), expected: expected.to_string(), got: got.to_string() }
    }

    /// Validation errors are caused by the caller's input; everything else is
    /// a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Prompt { .. } | Error::Shape { .. } | Error::Invalid(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
