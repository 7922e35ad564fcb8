use compass_core::CoreError;
use compass_moe::MoeError;

#[derive(Debug, thiserror::Error)]
pub enum MixtureError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] MoeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("weights are not on the simplex: {0}")]
    NotSimplex(String),
    #[error("need at least {need} runs, got {got}")]
    TooFewRuns { need: usize, got: usize },
    #[error("shard {0} is empty")]
    EmptyShard(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = MixtureError> = std::result::Result<T, E>;
