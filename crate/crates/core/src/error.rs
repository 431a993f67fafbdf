use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("repairing needs {needed} synthetic examples for cell (y={y}, s={s}) but the pool has {available}")]
    PoolShortfall {
        y: u8,
        s: u8,
        needed: usize,
        available: usize,
    },

    /// A metric needed a (s, y) stratum that has no examples.
    #[error("undefined stratum (s={s}, y={y}): no examples")]
    UndefinedStratum { s: u8, y: u8 },

    #[error("selection mask is empty (k={k}); raise k so the two top-k sets intersect")]
    EmptyMask { k: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors the CLI reports as configuration problems (exit code 1).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Shape(_) | Error::Precondition(_) | Error::Parse { .. }
        )
    }
}
