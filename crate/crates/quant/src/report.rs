//! Per-slice comparison of a quantized model against full precision.

use std::path::Path;

use compass_core::Tensor;
use compass_moe::{MoeModel, TokenBatch};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scheme::{fp32_logits, QuantizedModel};

/// Named evaluation slice (one synthetic language, say).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSlice {
    pub label: String,
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: String,
    pub tokens: usize,
    pub fp32_accuracy: f64,
    pub quant_accuracy: f64,
    /// Mean squared logit difference to full precision.
    pub logit_mse: f64,
    /// Fraction of positions whose top-1 prediction is unchanged.
    pub top1_agreement: f64,
}

impl SliceReport {
    pub fn accuracy_delta(&self) -> f64 {
        self.quant_accuracy - self.fp32_accuracy
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(logits: &Tensor, batch: &TokenBatch) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (t, (&target, &m)) in batch.targets.iter().zip(&batch.loss_mask).enumerate() {
        if m {
            n += 1;
            hit += usize::from(argmax(logits.row(t)) == target as usize);
        }
    }
    hit as f64 / n.max(1) as f64
}

/// Compare `qmodel` with the full-precision `model` on each slice.
pub fn report_error(
    model: &MoeModel,
    qmodel: &QuantizedModel,
    slices: &[EvalSlice],
) -> Result<Vec<SliceReport>> {
    slices
        .iter()
        .map(|s| {
            let batch = TokenBatch::from_sequences(&s.sequences)?;
            let a = fp32_logits(model, &batch)?;
            let b = qmodel.logits(&batch)?;
            let mse = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / a.numel() as f64;
            let agree = (0..a.rows())
                .filter(|&t| argmax(a.row(t)) == argmax(b.row(t)))
                .count();
            Ok(SliceReport {
                slice: s.label.clone(),
                tokens: batch.len(),
                fp32_accuracy: accuracy(&a, &batch),
                quant_accuracy: accuracy(&b, &batch),
                logit_mse: mse,
                top1_agreement: agree as f64 / a.rows() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Row<'a> {
    slice: &'a str,
    metric: &'a str,
    fp32_value: f64,
    quant_value: f64,
    delta: f64,
}

/// Long-format CSV: `slice,metric,fp32_value,quant_value,delta`.
pub fn write_report_csv(path: &Path, reports: &[SliceReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        let rows = [
            ("accuracy", r.fp32_accuracy, r.quant_accuracy),
            ("logit_mse", 0.0, r.logit_mse),
            ("top1_agreement", 1.0, r.top1_agreement),
        ];
        for (metric, f, q) in rows {
            w.serialize(Row {
                slice: &r.slice,
                metric,
                fp32_value: f,
                quant_value: q,
                delta: q - f,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
