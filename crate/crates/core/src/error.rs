use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: usize, lr: f32, loss: f32 },

    #[error("missing input {path}: run `{producer}` first")]
    MissingInput {
        path: PathBuf,
        producer: &'static str,
    },

    #[error("recovery undefined: full score equals baseline ({0})")]
    UndefinedRecovery(f64),

    #[error("endpoint failure: {0}")]
    Endpoint(String),

    #[error("malformed response: {0}")]
    Malformed(String),

    #[error("invalid format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
