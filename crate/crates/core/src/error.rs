use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record in an input file could not be accepted.
    #[error("{location}: {reason}")]
    Malformed { location: String, reason: String },

    #[error("unknown domain `{0}` (expected hotel, electronics, travel or software)")]
    UnknownDomain(String),

    #[error("unknown label `{0}` (expected suggestion or non_suggestion)")]
    UnknownLabel(String),

    #[error("duplicate review id `{0}`")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced NaN or infinity.
    #[error("non-finite loss {value} in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("did not converge within {iters} iterations (last max |delta| = {last_delta:e})")]
    NotConverged { iters: usize, last_delta: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            location: location.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NotConverged { .. })
    }
}
