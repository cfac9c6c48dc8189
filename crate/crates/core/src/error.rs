//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem failure while touching `path`.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A text or binary input could not be parsed.
    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    /// An acquisition protocol violated its invariants.
    #[error("invalid protocol: {0}")]
    Protocol(String),

    /// A volume violated its invariants or did not match the protocol.
    #[error("invalid volume: {0}")]
    Volume(String),

    /// A NIfTI file was malformed or uses an unsupported feature.
    #[error("nifti error in {path}: {detail}")]
    Nifti { path: PathBuf, detail: String },

    /// Stored model or dataset artifacts are inconsistent.
    #[error("format error: {0}")]
    Format(String),

    /// A configuration value is out of its legal range.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted (non-finite loss or incompatible shapes).
    #[error("training error: {0}")]
    Train(String),

    /// A numerical solver could not produce a valid answer.
    #[error("solver error: {0}")]
    Solver(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), detail: detail.into() }
    }

    pub(crate) fn nifti(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Nifti { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
