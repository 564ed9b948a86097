use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite value produced ({detail})")]
    NonFinite { op: String, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },

    #[error("backward already ran on this tape; build a fresh tape before calling again")]
    BackwardTwice,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sigma schedule exhausted at t={t} (len {len}, no repeat-last)")]
    ScheduleExhausted { t: usize, len: usize },

    #[error("idx format: {0}")]
    IdxFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
