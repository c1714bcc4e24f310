use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("time {0} lies outside [0, 1]")]
    Domain(f64),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("covariate `{0}` has zero variance or zero norm")]
    DegenerateColumn(String),

    #[error("block {0}: system matrix is singular even after jitter")]
    SingularBlock(usize),

    #[error("oracle solver did not converge within {0} iterations")]
    OracleNonConvergence(usize),

    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("study failed: {0}")]
    Study(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularBlock(_)
                | Error::OracleNonConvergence(_)
                | Error::Tuning(_)
                | Error::Study(_)
                | Error::DegenerateDesign(_)
                | Error::DegenerateColumn(_)
        )
    }
}
