use thiserror::Error;

/// Errors raised across model construction, training and evaluation.
#[derive(Debug, Error)]
pub enum DpatError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("task selection error: {0}")]
    Selection(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("augmentation error: {0}")]
    Augment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DpatError>;
