use compass_core::stats::{median, pearson, spearman};
use compass_core::Prng;
use compass_moe::TokenBatch;
use serde::{Deserialize, Serialize};

use crate::corpus::Shard;
use crate::error::{MixtureError, Result};
use crate::mixture::{sample_mixtures, MixtureSpec};
use crate::proxy::{run_proxy, ProxyConfig, ProxyRun};
use crate::regress::{Regressor, RegressorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub regressor: Regressor,
    pub training_mse: f64,
    pub n_runs: usize,
    pub n_excluded: usize,
}

/// Fits on the non-diverged runs; needs at least `2·S` of them.
pub fn fit_regressor(runs: &[ProxyRun], kind: &RegressorKind) -> Result<FitReport> {
    let valid: Vec<&ProxyRun> = runs
        .iter()
        .filter(|r| !r.diverged && r.val_loss.is_finite())
        .collect();
    let s = runs.first().map_or(1, |r| r.mixture.len());
    if valid.len() < 2 * s {
        return Err(MixtureError::TooFewRuns {
            need: 2 * s,
            got: valid.len(),
        });
    }
    let x: Vec<Vec<f64>> = valid.iter().map(|r| r.mixture.weights.clone()).collect();
    let y: Vec<f64> = valid.iter().map(|r| r.val_loss).collect();
    let regressor = Regressor::fit(&x, &y, kind)?;
    Ok(FitReport {
        training_mse: regressor.mse(&x, &y),
        regressor,
        n_runs: valid.len(),
        n_excluded: runs.len() - valid.len(),
    })
}

/// Lowest prediction among `pool_size` fresh Dirichlet draws and the
/// corners; ties go to the first in pool order.
pub fn select_mixture(
    reg: &Regressor,
    s: usize,
    pool_size: usize,
    rng: &mut Prng,
) -> Result<MixtureSpec> {
    select_from(reg, &sample_mixtures(s, pool_size, rng)?)
}

pub fn select_from(reg: &Regressor, pool: &[MixtureSpec]) -> Result<MixtureSpec> {
    let mut best: Option<(f64, &MixtureSpec)> = None;
    for m in pool {
        let p = reg.predict(&m.weights);
        if best.is_none_or(|(b, _)| p < b) {
            best = Some((p, m));
        }
    }
    best.map(|(_, m)| m.clone())
        .ok_or_else(|| MixtureError::InvalidArgument("empty pool".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

pub fn correlation(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(MixtureError::InvalidArgument(
            "series differ in length".into(),
        ));
    }
    Ok(Correlation {
        pearson: pearson(x, y).unwrap_or(0.0),
        spearman: spearman(x, y).unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedSet {
    pub name: String,
    pub pearson: f64,
    pub spearman: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub threshold: f64,
    pub n_runs: usize,
    pub sets: Vec<ScreenedSet>,
    /// Small vs larger proxies on shared mixtures, when measured.
    pub cross_scale: Option<Correlation>,
}

pub const MIN_SCREEN_RUNS: usize = 10;
pub const DEFAULT_SCREEN_THRESHOLD: f64 = 0.7;

/// Correlates each candidate set's per-run losses with the target series;
/// keeps sets with `|Spearman| ≥ threshold`.
pub fn screen_validation_sets(
    candidates: &[(String, Vec<f64>)],
    target: &[f64],
    threshold: f64,
) -> Result<ScreeningReport> {
    if target.len() < MIN_SCREEN_RUNS {
        return Err(MixtureError::TooFewRuns {
            need: MIN_SCREEN_RUNS,
            got: target.len(),
        });
    }
    let sets = candidates
        .iter()
        .map(|(name, losses)| {
            let c = correlation(losses, target)?;
            Ok(ScreenedSet {
                name: name.clone(),
                pearson: c.pearson,
                spearman: c.spearman,
                retained: c.spearman.abs() >= threshold,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScreeningReport {
        threshold,
        n_runs: target.len(),
        sets,
        cross_scale: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub chosen: MixtureSpec,
    pub chosen_loss: f64,
    pub baseline_losses: Vec<f64>,
    pub median_baseline_loss: f64,
    /// `chosen_loss − median_baseline_loss`; negative favors the choice.
    pub delta: f64,
}

/// Trains `cfg` (normally wider than the proxy) on the chosen mixture and on
/// each baseline with the same seed, and compares against the median
/// baseline loss.
pub fn validate_selection(
    chosen: &MixtureSpec,
    baselines: &[MixtureSpec],
    cfg: &ProxyConfig,
    shards: &[Shard],
    target: &TokenBatch,
    seed: u64,
) -> Result<SelectionReport> {
    if baselines.is_empty() {
        return Err(MixtureError::InvalidArgument("no baseline mixtures".into()));
    }
    let loss = |m: &MixtureSpec| -> Result<f64> {
        let r = run_proxy(0, m, seed, cfg, shards, target, &[])?;
        Ok(if r.diverged {
            f64::INFINITY
        } else {
            r.val_loss
        })
    };
    let chosen_loss = loss(chosen)?;
    let baseline_losses: Vec<f64> = baselines.iter().map(loss).collect::<Result<_>>()?;
    let median_baseline_loss = median(&baseline_losses);
    Ok(SelectionReport {
        chosen: chosen.clone(),
        chosen_loss,
        baseline_losses,
        median_baseline_loss,
        delta: chosen_loss - median_baseline_loss,
    })
}
