use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] mtpbias_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status: 3 for configuration, 4 for data and 5 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        use mtpbias_core::Error as E;
        match self {
            CliError::Config(_) => 3,
            CliError::Data(_) | CliError::Io(_) | CliError::Json(_) => 4,
            CliError::Core(e) if e.is_numeric() => 5,
            CliError::Core(E::Config(_) | E::Validation(_)) => 3,
            CliError::Core(_) => 4,
        }
    }
}
