use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    /// A target puts mass on a cluster whose posterior is exactly zero.
    #[error("KL divergence undefined: q[{row}][{col}] > 0 while p[{row}][{col}] == 0")]
    DivergenceUndefined { row: usize, col: usize },

    #[error("column {0} has zero total mass")]
    DegenerateColumn(usize),

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("training diverged at iteration {iteration}: {what}")]
    TrainingDiverged { iteration: usize, what: String },

    #[error("inner q-step solver stalled with residual {residual:e}")]
    InnerSolverStalled { residual: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
