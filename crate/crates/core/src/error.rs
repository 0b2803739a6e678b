use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("dataset is empty after dropping partitions with fewer than {min_samples} samples")]
    EmptyDataset { min_samples: usize },

    #[error("partition {0} is not centered")]
    NotCentered(usize),

    #[error("degenerate variance at cell ({i}, {j}): denominator of the normalized statistic is zero")]
    DegenerateVariance { i: usize, j: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("graph sequence is not nested at step {0}")]
    NotNested(usize),

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for I/O and configuration problems, 1 for computation errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Config(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
