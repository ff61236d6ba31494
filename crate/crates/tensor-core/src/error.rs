use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: shapes {lhs:?} and {rhs:?} are not broadcastable")]
    NotBroadcastable {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {what}")]
    InvalidShape { what: String },

    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("conv2d: kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        padded: Vec<usize>,
    },

    #[error("operation mixes tensors from different tapes")]
    TapeMismatch,

    #[error("backward requires a scalar on a tape (got {len} elements, on_tape = {on_tape})")]
    BackwardFromNonScalar { len: usize, on_tape: bool },

    #[error("backward has already been run on this tape")]
    BackwardAlreadyRan,

    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },

    #[error("tensor io: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor format: {what}")]
    Format { what: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
