use thiserror::Error;

/// Error type shared by the core pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("coverage error: missing clips {0:?}")]
    Coverage(Vec<String>),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("loss function is not deterministic: {0}")]
    Determinism(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
