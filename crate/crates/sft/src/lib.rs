//! Supervised fine-tuning data path.
//!
//! E-commerce samples train on the whole sequence, general samples on the
//! answer only. Samples are packed whole into fixed-length rows and never
//! attend across sample boundaries.

pub mod data;
pub mod pack;

use compass_moe::{MoeModel, StepLog, Trainer};

pub use data::{build_loss_mask, encode, read_jsonl, write_jsonl, Domain, SftRecord, SftSample};
pub use pack::{build_attention_mask, pack_samples, packs_to_batch, PackedBatch};

use compass_moe::MoeError;

#[derive(Debug, thiserror::Error)]
pub enum SftError {
    #[error("sample {index}: empty answer")]
    EmptyAnswer { index: usize },
    #[error("sample {index} has {len} tokens, more than max_len {max_len}")]
    SampleTooLong {
        index: usize,
        len: usize,
        max_len: usize,
    },
    #[error("max_len must be positive")]
    ZeroMaxLen,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] MoeError),
}

pub type Result<T, E = SftError> = std::result::Result<T, E>;

/// One optimizer step on packed rows. `L_LM` of the returned log is the
/// masked-mean cross-entropy over the trained positions; the router
/// regularizers and MTP losses are added to the descended objective as in
/// pretraining.
pub fn sft_step(trainer: &mut Trainer, packs: &[PackedBatch]) -> Result<StepLog> {
    let batch = packs_to_batch(packs);
    Ok(trainer.train_step(&batch)?)
}

/// Packs per forward in [`sft_loss`]; attention cost is quadratic in the
/// flattened batch length.
pub const EVAL_PACKS: usize = 4;

/// Masked-mean cross-entropy of `model` on packed rows, without updating it.
pub fn sft_loss(model: &MoeModel, packs: &[PackedBatch]) -> Result<f64> {
    let (mut total, mut positions) = (0.0f64, 0usize);
    for chunk in packs.chunks(EVAL_PACKS) {
        let batch = packs_to_batch(chunk);
        let n = batch.loss_positions();
        if n == 0 {
            continue;
        }
        total += model.lm_forward(&batch)?.l_lm * n as f64;
        positions += n;
    }
    if positions == 0 {
        // same error as a single all-masked forward
        model.lm_forward(&packs_to_batch(packs))?;
    }
    Ok(total / positions as f64)
}
