use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config field `{field}`: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("language length {got} exceeds the clip length {max}")]
    TooManyWords { got: usize, max: usize },
    #[error("{0}")]
    Missing(String),
    #[error("parameter/config mismatch: {0}")]
    ParamMismatch(String),
    #[error("blob format: {0}")]
    Format(String),
    #[error("{name}: size limit exceeded ({detail})")]
    SizeLimit { name: &'static str, detail: String },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("finite differences produced a non-finite value at element {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::Config {
        field,
        message: message.into(),
    }
}
