use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask not aligned with model: {0}")]
    Alignment(String),

    #[error("value outside its domain: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("mask closure violated at parameter {index} (value {value})")]
    Integrity { index: usize, value: f32 },

    #[error("malformed blob: {0}")]
    Malformed(String),

    #[error("truncated blob: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("unsupported blob version {0}")]
    Version(u16),

    #[error("result files disagree: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
