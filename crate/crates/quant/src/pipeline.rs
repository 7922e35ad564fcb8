//! End-to-end recipes from a full-precision model to a quantized one.

use compass_moe::MoeModel;
use serde::{Deserialize, Serialize};

use crate::balance::{balance_calibration, Balanced};
use crate::calib::{collect_calibration, CalibrationStats};
use crate::error::Result;
use crate::scheme::{quantize_model, Grid, QuantScheme, QuantizedModel};
use crate::smooth::{compute_smoothing, fold_smoothing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    /// Minimum tokens per expert after balancing.
    pub tau: u64,
    /// Smoothing migration strength.
    pub alpha: f64,
    pub grid: Grid,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            tau: 128,
            alpha: 0.5,
            grid: Grid::E4m3,
        }
    }
}

/// Which expert-aware steps to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub balance: bool,
    pub smooth: bool,
}

impl Recipe {
    pub const NAIVE: Recipe = Recipe {
        balance: false,
        smooth: false,
    };
    pub const EXPERT_AWARE: Recipe = Recipe {
        balance: true,
        smooth: true,
    };

    pub fn label(self) -> &'static str {
        match (self.balance, self.smooth) {
            (false, false) => "naive",
            (true, false) => "balanced",
            (false, true) => "smoothed",
            (true, true) => "expert_aware",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantOutcome {
    pub qmodel: QuantizedModel,
    pub scheme: QuantScheme,
    /// Statistics of the unmodified calibration set.
    pub initial: CalibrationStats,
    pub balanced: Option<Balanced>,
}

/// Calibrate on `calib` (oversampled from `pool` when balancing), smooth
/// if asked, and quantize. The returned model computes the same function
/// as `model` up to quantization error.
pub fn quantize_recipe(
    model: &MoeModel,
    calib: &[Vec<u32>],
    pool: &[Vec<u32>],
    cfg: &QuantConfig,
    recipe: Recipe,
) -> Result<QuantOutcome> {
    let initial = collect_calibration(model, calib)?;
    let (balanced, stats) = if recipe.balance {
        let b = balance_calibration(&initial, calib, pool, model, cfg.tau)?;
        let stats = if b.added.is_empty() {
            initial.clone()
        } else {
            collect_calibration(model, &b.sequences)?
        };
        (Some(b), stats)
    } else {
        (None, initial.clone())
    };
    let seqs = balanced.as_ref().map_or(calib, |b| &b.sequences[..]);
    let (target, stats, smoothing) = if recipe.smooth {
        let s = compute_smoothing(&stats, cfg.alpha)?;
        let folded = fold_smoothing(model, &s)?;
        let stats = collect_calibration(&folded, seqs)?;
        (folded, stats, Some(s))
    } else {
        (model.clone(), stats, None)
    };
    let tau = recipe.balance.then_some(cfg.tau);
    let scheme = QuantScheme::build(&target, &stats, cfg.grid, smoothing, tau)?;
    let qmodel = quantize_model(&target, &scheme)?;
    Ok(QuantOutcome {
        qmodel,
        scheme,
        initial,
        balanced,
    })
}
