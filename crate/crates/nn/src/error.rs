use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for branch {branch} with {classes} classes")]
    LabelOutOfRange {
        branch: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("weights file: {0}")]
    Format(String),
    #[error("observer aborted training: {0}")]
    Observer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
