use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: input {input} produces an empty output")]
    EmptyOutput { op: &'static str, input: Shape },
    #[error("{op}: expected {expected} channels, got {found}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: kernel size {kernel} must be odd")]
    EvenKernel { op: &'static str, kernel: usize },
    #[error("{op}: kernel {kernel} larger than input {input}")]
    KernelTooLarge {
        op: &'static str,
        kernel: usize,
        input: Shape,
    },
    #[error("{op}: spatial extents of {shape} must be divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        shape: Shape,
        divisor: usize,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward root must be scalar, got {0}")]
    NonScalarRoot(Shape),
    #[error("invalid model config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("unknown preset `{name}`; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("optimizer state does not match the parameter store: {0}")]
    UninitializedState(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    External(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
