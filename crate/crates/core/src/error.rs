use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, unknown ids, violated invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse at runtime, e.g. backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Training diverged.
    #[error("run error at epoch {epoch}, batch {batch}: {detail}")]
    Run {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// The unlabeled pool is empty; no further cycle can run.
    #[error("scenario complete: unlabeled pool is empty")]
    PoolExhausted,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Config(format!("{op}: shape mismatch {a:?} vs {b:?}"))
    }
}
