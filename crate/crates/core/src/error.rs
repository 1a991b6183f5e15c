// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by `laser-core`.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum LaserError {
    /// A caller-supplied argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative numerical routine failed to converge.
    #[error("numerical failure: SVD of {rows}x{cols} matrix did not converge after {iterations} QR sweeps")]
    NonConvergence {
        rows: usize,
        cols: usize,
        iterations: usize,
    },

    /// A tensor container was malformed.
    #[error("container format error: {0}")]
    Format(String),

    /// A dataset record could not be parsed.
    #[error("dataset {path}: line {line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Evaluation of a single sample failed.
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<LaserError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LaserError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LaserError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LaserError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_sample(self, id: &str) -> Self {
        match self {
            already @ LaserError::Sample { .. } => already,
            other => LaserError::Sample {
                id: id.to_string(),
                source: Box::new(other),
            },
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, LaserError>;
