//! Per-suite, per-slice evaluation reports.

use std::path::Path;

use anyhow::Result;
use compass_core::synthetic::{gen_synthetic, language_suite, render_template, TemplateFamily};
use compass_core::{tokenizer, Prng, Tensor};
use compass_moe::{MoeModel, TokenBatch};
use compass_quant::{fp32_logits, EvalSlice, QuantizedModel};
use serde::{Deserialize, Serialize};

/// Anything that maps a batch to `[T × V]` logits.
pub trait LogitModel {
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor>;
}

impl LogitModel for MoeModel {
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        Ok(fp32_logits(self, batch)?)
    }
}

impl LogitModel for QuantizedModel {
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        Ok(QuantizedModel::logits(self, batch)?)
    }
}

/// A named group of evaluation slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub name: String,
    pub slices: Vec<EvalSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub suite: String,
    pub slice: String,
    /// Scored next-token predictions.
    pub tokens: usize,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    /// Top-1 next-token accuracy.
    pub accuracy: f64,
}

pub const EVAL_HEADER: [&str; 5] = ["suite", "slice", "tokens", "loss", "accuracy"];

/// One row per (suite, slice), in input order. Slices without sequences
/// score zero tokens with NaN loss and accuracy.
pub fn eval_report(model: &dyn LogitModel, suites: &[EvalSuite]) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for suite in suites {
        for slice in &suite.slices {
            let (tokens, loss, accuracy) = if slice.sequences.is_empty() {
                (0, f64::NAN, f64::NAN)
            } else {
                let batch = TokenBatch::from_sequences(&slice.sequences)?;
                score(&model.logits(&batch)?, &batch)
            };
            rows.push(EvalRow {
                suite: suite.name.clone(),
                slice: slice.label.clone(),
                tokens,
                loss,
                accuracy,
            });
        }
    }
    Ok(rows)
}

fn score(logits: &Tensor, batch: &TokenBatch) -> (usize, f64, f64) {
    let (mut n, mut nll, mut hits) = (0usize, 0.0f64, 0usize);
    for (t, (&target, &m)) in batch.targets.iter().zip(&batch.loss_mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(t);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = max
            + row
                .iter()
                .map(|&v| (v as f64 - max).exp())
                .sum::<f64>()
                .ln();
        nll += lse - row[target as usize] as f64;
        // first maximal index, so ties resolve the same way everywhere
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        hits += usize::from(best == target as usize);
        n += 1;
    }
    let d = n.max(1) as f64;
    (n, nll / d, hits as f64 / d)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    crate::run::write_csv(path, &EVAL_HEADER, rows)
}

/// Settings for [`default_suites`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Synthetic languages in the `language` suite.
    pub languages: usize,
    pub sequences_per_slice: usize,
    pub seq_len: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            languages: 4,
            sequences_per_slice: 16,
            seq_len: 32,
        }
    }
}

/// A `language` suite (one slice per synthetic language) and an
/// `instruction` suite (e-commerce and general templates).
pub fn default_suites(cfg: &SuiteConfig, seed: u64) -> Result<Vec<EvalSuite>> {
    let langs = language_suite(16, 0.3);
    let mut language = Vec::new();
    for spec in langs.iter().take(cfg.languages) {
        let toks = gen_synthetic(spec, seed, cfg.sequences_per_slice * cfg.seq_len)?;
        language.push(EvalSlice {
            label: spec.label.clone(),
            sequences: toks.chunks(cfg.seq_len).map(<[u32]>::to_vec).collect(),
        });
    }
    let mut rng = Prng::new(seed).split(0xE7A1);
    let mut instruction = Vec::new();
    for (label, family) in [
        ("ecommerce", TemplateFamily::ProductQa),
        ("general", TemplateFamily::GeneralChat),
    ] {
        let sequences = (0..cfg.sequences_per_slice)
            .map(|_| {
                let r = render_template(family, &mut rng);
                let mut s = vec![tokenizer::BOS];
                for t in &r.turns {
                    s.extend(tokenizer::encode(t));
                    s.push(tokenizer::EOT);
                }
                s.extend(tokenizer::encode(&r.prompt));
                s.extend(tokenizer::encode(&r.answer));
                s.push(tokenizer::EOS);
                s.truncate(cfg.seq_len);
                s
            })
            .collect();
        instruction.push(EvalSlice {
            label: label.into(),
            sequences,
        });
    }
    Ok(vec![
        EvalSuite {
            name: "language".into(),
            slices: language,
        },
        EvalSuite {
            name: "instruction".into(),
            slices: instruction,
        },
    ])
}
