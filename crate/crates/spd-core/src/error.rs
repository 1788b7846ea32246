//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or raster dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates its contract.
    #[error("invalid config: {0}")]
    Config(String),

    /// An argument violates an operation precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Filesystem failure, with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image encode/decode failure, with the offending path.
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    /// A dataset file does not parse.
    #[error("malformed {what} in {path}: {msg}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        msg: String,
    },

    /// Training produced a non-finite loss component.
    #[error("non-finite loss at iteration {iteration}: component {component}")]
    NonFinite { iteration: usize, component: String },

    /// A metric was requested from an accumulator with no observations.
    #[error("empty accumulator")]
    EmptyAccumulator,

    /// Checkpoint archive is corrupt or from an incompatible layout.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
