use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] numkernel::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Geometrically degenerate input (collinear keypoints, empty frustum, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),

    #[error("not a rotation matrix: {0}")]
    NotRotation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt {what}: {reason}")]
    Corrupt { what: String, reason: String },

    #[error("mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(what: impl std::fmt::Display, reason: impl std::fmt::Display) -> Self {
        Error::Corrupt {
            what: what.to_string(),
            reason: reason.to_string(),
        }
    }
}
