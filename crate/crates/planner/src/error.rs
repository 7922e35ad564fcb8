use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{p} stages for {layers} layers")]
    TooManyStages { p: usize, layers: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PlanError>;
