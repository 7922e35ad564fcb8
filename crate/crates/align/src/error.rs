use compass_core::CoreError;
use compass_moe::MoeError;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] MoeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("reference log-probs not cached for {key}")]
    CacheMiss { key: String },
    #[error("corrupt cache: {0}")]
    Cache(String),
    #[error("empty response")]
    EmptyResponse,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("marginal is not on the simplex: {0}")]
    NonSimplex(String),
    #[error("margin must be non-negative, got {0}")]
    NegativeMargin(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;
