//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the pipeline, split so the CLI can map
/// validation problems and runtime problems to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Caller-supplied data violates a precondition (shape, label range, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Two operands have incompatible dimensions.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A file on disk exists but its contents are malformed or inconsistent.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A checkpoint, manifest, or scene does not fit what it is used with.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// I/O failure while writing artifacts.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A gradient check exceeded its error threshold.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
