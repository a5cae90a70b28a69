use thiserror::Error;

use mtpbias_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("supervision: {0}")]
    Supervision(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} (learning rate {learning_rate})")]
    NonFinite { step: u64, learning_rate: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the failure originates in numeric evaluation rather than
    /// input data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Tensor(TensorError::Numeric { .. })
        )
    }
}
