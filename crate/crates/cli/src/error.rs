use phasepos::CoreError;
use phasepos_nn::NnError;
use thiserror::Error;

/// Pipeline failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training interrupted after epoch {0}")]
    Interrupted(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Interrupted(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. } | CoreError::Domain(_) => CliError::Config(e.to_string()),
            CoreError::Numeric(_) | CoreError::Internal(_) => CliError::Numeric(e.to_string()),
            CoreError::Nn(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) | NnError::Spec(_) => CliError::Config(e.to_string()),
            NnError::Diverged { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
