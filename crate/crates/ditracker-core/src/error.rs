//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors produced by the tracking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's contract
    /// (bad shape, out-of-range parameter, malformed config).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was invoked before its prerequisite artifact exists
    /// (e.g. training without a pretrained backbone checkpoint).
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A stored artifact (checkpoint, clip directory, manifest) failed to
    /// parse or is internally inconsistent.
    #[error("corrupt artifact at {path}: {reason}")]
    CorruptArtifact { path: PathBuf, reason: String },
}

impl Error {
    /// Shorthand for [`Error::InvalidArgument`] with formatted text.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
