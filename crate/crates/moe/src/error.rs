use compass_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of length {len} is too short, need at least {need}")]
    SequenceTooShort { len: usize, need: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("batch has no loss positions")]
    EmptyLossMask,
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T, E = MoeError> = std::result::Result<T, E>;
