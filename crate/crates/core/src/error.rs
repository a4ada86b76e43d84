use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("container format: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("trace validation failed: {0}")]
    Validation(String),

    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("score function mismatch: scores are {scores}, policy is {policy}")]
    FunctionMismatch { scores: String, policy: String },

    #[error("unknown identifier `{0}`")]
    Unknown(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
