//! Crate-wide error type.
//!
//! The CLI maps these variants onto exit codes: configuration and usage
//! problems exit 2, data/format problems exit 3, numerical divergence exits 4.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data; `detail` names the byte offset or line number.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Bad configuration value or invariant violation at load time.
    #[error("invalid config: {0}")]
    Config(String),

    /// A caller violated an operation precondition.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// More centerline points than the fixed-length encoding can hold.
    #[error("centerline has {len} points but the encoding holds at most {max}")]
    Capacity { len: usize, max: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    /// Checkpoint hyperparameters disagree with the active config.
    #[error("checkpoint incompatible with config: {}", .diffs.join("; "))]
    CheckpointMismatch { diffs: Vec<String> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Shape { .. }
            | Error::Capacity { .. }
            | Error::CheckpointMismatch { .. } => 3,
            Error::Divergence { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
