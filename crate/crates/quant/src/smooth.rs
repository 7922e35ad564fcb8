//! Channel-wise activation smoothing shared by the router and all experts
//! of a layer, folded into that layer's pre-FFN RMSNorm gain.

use std::collections::BTreeMap;

use compass_core::ParamId;
use compass_moe::MoeModel;
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationStats;
use crate::error::{QuantError, Result};

/// One smoothing vector per MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub alpha: f64,
    pub vectors: BTreeMap<usize, Vec<f32>>,
}

/// `s_j = max|X_j|^α / max|W_j|^(1−α)`, with `W` the joint maxima over the
/// router and every expert. Channels where either maximum is zero get 1.
pub fn compute_smoothing(stats: &CalibrationStats, alpha: f64) -> Result<Smoothing> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QuantError::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    let mut vectors = BTreeMap::new();
    for (&l, w) in &stats.w_max {
        let x = stats.x_max(l, w.len());
        let s = x
            .iter()
            .zip(w)
            .map(|(&x, &w)| {
                if x > 0.0 && w > 0.0 {
                    ((x as f64).powf(alpha) / (w as f64).powf(1.0 - alpha)) as f32
                } else {
                    1.0
                }
            })
            .collect();
        vectors.insert(l, s);
    }
    Ok(Smoothing { alpha, vectors })
}

fn scale_rows(model: &mut MoeModel, id: ParamId, s: &[f32]) -> Result<()> {
    let t = model.params.get(id);
    let cols = t.numel() / s.len();
    let v: Vec<f32> = t
        .data()
        .chunks(cols)
        .zip(s)
        .flat_map(|(row, &sj)| row.iter().map(move |&w| w * sj))
        .collect();
    model.params.assign(id, &v)?;
    Ok(())
}

/// Divide each MoE layer's FFN norm gain by `s` and scale the matching
/// input rows of the router and of every expert's gate and up matrices by
/// `s`. At full precision the folded model computes the same function.
pub fn fold_smoothing(model: &MoeModel, smoothing: &Smoothing) -> Result<MoeModel> {
    let mut out = model.clone();
    let d = model.cfg.d_model;
    for (&l, s) in &smoothing.vectors {
        if s.len() != d || l >= model.cfg.n_layers || !model.cfg.is_moe_layer(l) {
            return Err(QuantError::InvalidArgument(format!(
                "no MoE layer {l} of width {}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(QuantError::InvalidScale(bad));
        }
        let ids = model.ids.layers[l].clone();
        let gain: Vec<f32> = model
            .params
            .get(ids.ffn_norm)
            .data()
            .iter()
            .zip(s)
            .map(|(g, v)| g / v)
            .collect();
        out.params.assign(ids.ffn_norm, &gain)?;
        scale_rows(&mut out, ids.router.expect("moe layer"), s)?;
        for e in &ids.experts {
            scale_rows(&mut out, e.w_gate, s)?;
            scale_rows(&mut out, e.w_up, s)?;
        }
    }
    Ok(out)
}
