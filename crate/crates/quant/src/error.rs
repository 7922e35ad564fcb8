use compass_core::CoreError;
use compass_moe::MoeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] MoeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-finite value {0}")]
    NonFinite(f32),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f32),
    #[error("expert {expert} of layer {layer} reached only {count} of {tau} calibration tokens; the pool is exhausted")]
    Unbalanced {
        layer: usize,
        expert: usize,
        count: u64,
        tau: u64,
    },
    #[error("no calibration data for {0}")]
    MissingCalibration(String),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, QuantError>;
