use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: {axis} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: spatial dims {height}x{width} must be even (no implicit padding)")]
    OddSpatial {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("input {height}x{width} is not divisible by {multiple}; pad or resize the image first")]
    IndivisibleInput {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable is detached from the computation record")]
    Detached,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: no pixels inside the field of view")]
    EmptyFov(&'static str),
    #[error("{0}: ground truth has no positive pixels")]
    NoPositives(&'static str),
    #[error("{0}")]
    InvalidInput(String),
    #[error("parameter {0:?} not found")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
