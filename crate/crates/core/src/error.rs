use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("matrix `{0}` is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no feasible samples in the requested window")]
    NoFeasibleSamples,

    #[error("OCP solve failed with status {0:?}")]
    Solve(crate::sqp::SolveStatus),

    #[error("region store rejected: {0}")]
    InvalidStore(String),

    #[error("model hash mismatch: store was built for {stored}, controller model is {actual}")]
    ModelHashMismatch { stored: String, actual: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
