use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("failed to encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("expected {expected} range, got {actual}")]
    RangeTag { expected: String, actual: String },

    #[error("expected {expected} channels, got {actual}")]
    Channels { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attenuation is zero inside the mask at pixel ({row}, {col})")]
    Singular { row: usize, col: usize },

    #[error("rank-deficient fit on channel {channel}: shadow values are constant")]
    RankDeficient { channel: usize },

    #[error("target BER {target:.4} unreachable; maximum achievable is {max:.4}")]
    UnreachableBer { target: f64, max: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs or configuration, as opposed to runtime
    /// aborts. Drives the CLI exit code.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFinite { .. } | Error::Encode { .. } | Error::Locked(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
