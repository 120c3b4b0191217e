use thiserror::Error;

pub type Result<T> = std::result::Result<T, TnasError>;

#[derive(Debug, Error)]
pub enum TnasError {
    #[error(transparent)]
    Ad(#[from] tnas_autodiff::AdError),

    #[error("mixture weights are not a simplex: sum {sum}, min entry {min}")]
    Normalization { sum: f64, min: f64 },

    #[error("choice index {index} out of range for dimension {dim:?} with {choices} choices")]
    Choice {
        dim: String,
        index: usize,
        choices: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("IDX format error: {0}")]
    IdxFormat(String),

    #[error("non-finite loss at {where_}: training aborted")]
    Divergence { where_: String },

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("refusing resume: {0}")]
    ResumeMismatch(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}
