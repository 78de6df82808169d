//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the toolkit.
///
/// The variants are grouped so callers (notably the CLI) can map them onto
/// exit classes: usage problems, data/format problems, and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file did not conform to its expected on-disk format. `offset` is the
    /// byte position at which decoding failed, when known.
    #[error("format error in {path}: {msg}{}", offset.map(|o| format!(" (byte {o})")).unwrap_or_default())]
    Format {
        path: PathBuf,
        msg: String,
        offset: Option<usize>,
    },

    /// Input data violated a documented contract (shape mismatch, empty
    /// manifest, out-of-range score, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A numeric failure: NaN/Inf in a forward or backward pass, divergent
    /// loss, undefined statistic (constant vector correlation, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>, offset: Option<usize>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
            offset,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
