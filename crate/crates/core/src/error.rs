use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGrad { param: String, step: u64 },
    #[error("non-finite loss at step {step} (last log row: {last_row})")]
    NonFiniteLoss { step: u64, last_row: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
