//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown parameter group(s): {}", .0.join(", "))]
    UnknownGroup(Vec<String>),

    #[error("gradient statistics requested before any backward pass")]
    GradsNotReady,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule constraint violated: {0}")]
    Schedule(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot decode unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("data stream produced no samples")]
    EmptyStream,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
