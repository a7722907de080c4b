use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stale state: {0}")]
    State(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("flow integration unstable at t = {t:.4e}: {reason}; retry with a smaller dt")]
    Instability { t: f64, reason: String },

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
