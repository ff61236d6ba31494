use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfVocab { id: u16, size: usize },

    #[error("timestep {t} out of range for {steps}-step schedule")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("mode {mode} requires {what}")]
    MissingConditioning { mode: String, what: &'static str },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error("data format: {0}")]
    DataFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
