use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the laboratory. CLI exit codes are derived from
/// [`Error::is_config`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimension {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("step {step} out of range {lo}..={hi}")]
    Step { step: usize, lo: usize, hi: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report format error on {path}: {msg}")]
    Report { path: PathBuf, msg: String },
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
