use std::collections::BTreeMap;

use anyhow::Result;
use compass_core::stats::spearman;
use compass_core::synthetic::language_suite;
use compass_core::Prng;
use compass_mixture::{
    build_proxy_corpus, eval_batch, fit_regressor, run_proxy, run_proxy_sweep, run_seed,
    sample_mixtures, select_mixture, synthetic_shards, write_sweep_csv, MixtureSpec, ProxyConfig,
    ProxyRun, RegressorKind,
};
use serde::{Deserialize, Serialize};

use super::resolve;
use crate::args::{Cli, MixtureArgs};
use crate::config::{config_error, require};
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub n_shards: usize,
    pub concentration: f64,
    pub tokens_per_shard: usize,
    pub val_tokens: usize,
    /// Sweep size: Dirichlet draws plus the one-hot corners.
    pub n_mixtures: usize,
    pub proxy: ProxyConfig,
    /// Shard weights of the target (validation) distribution.
    pub target: BTreeMap<usize, f64>,
    pub eval_windows: usize,
    pub pool_size: usize,
    pub regressor: RegressorKind,
    /// Sweep mixtures re-trained with a wider proxy (0 skips).
    pub cross_scale: usize,
    pub widen: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            n_shards: 16,
            concentration: 0.3,
            tokens_per_shard: 20_000,
            val_tokens: 4000,
            n_mixtures: 512,
            proxy: ProxyConfig::default(),
            target: BTreeMap::from([(2, 0.5), (7, 0.3), (11, 0.2)]),
            eval_windows: 32,
            pool_size: 4096,
            regressor: RegressorKind::default(),
            cross_scale: 32,
            widen: 2,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        require((1..=256).contains(&self.n_shards), || {
            "n_shards must be in 1..=256".into()
        })?;
        require(self.n_mixtures > self.n_shards, || {
            "n_mixtures must exceed n_shards (corners are always included)".into()
        })?;
        require(self.cross_scale <= self.n_mixtures, || {
            "cross_scale cannot exceed n_mixtures".into()
        })?;
        require(
            self.widen >= 1 && self.pool_size >= 1 && self.eval_windows >= 1,
            || "widen, pool_size and eval_windows must be positive".into(),
        )?;
        require(self.target.keys().all(|&k| k < self.n_shards), || {
            "target names a shard out of range".into()
        })?;
        Ok(())
    }

    pub fn target_mixture(&self) -> Result<MixtureSpec> {
        let mut w = vec![0.0; self.n_shards];
        for (&k, &v) in &self.target {
            w[k] = v;
        }
        MixtureSpec::new(w).map_err(|e| config_error(format!("target: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct MixtureResult {
    pub runs: Vec<ProxyRun>,
    pub chosen: MixtureSpec,
    pub chosen_predicted: f64,
    /// True proxy loss of the chosen mixture, trained like any sweep run.
    pub chosen_loss: f64,
    /// Share of sweep runs with a strictly lower loss than the chosen mixture.
    pub chosen_quantile: f64,
    pub training_mse: f64,
    /// `(index, small loss, wide loss)` for the cross-scale mixtures.
    pub cross: Vec<(usize, f64, f64)>,
    pub cross_spearman: Option<f64>,
}

/// Sweep, fit, select and score. Every random stream is derived from `seed`.
pub fn mixture_experiment(cfg: &MixtureConfig, seed: u64, jobs: usize) -> Result<MixtureResult> {
    cfg.validate()?;
    let specs = language_suite(cfg.n_shards, cfg.concentration);
    let shards = synthetic_shards(&specs, seed.wrapping_add(1), cfg.tokens_per_shard)?;
    let val = synthetic_shards(&specs, seed.wrapping_add(2), cfg.val_tokens)?;
    let seq = cfg.proxy.seq_len;
    let stream = build_proxy_corpus(
        &cfg.target_mixture()?,
        cfg.eval_windows * seq,
        &val,
        &mut Prng::new(seed.wrapping_add(3)),
    )?;
    let target = eval_batch(&stream, seq, cfg.eval_windows)?;
    let mixtures = sample_mixtures(
        cfg.n_shards,
        cfg.n_mixtures - cfg.n_shards,
        &mut Prng::new(seed.wrapping_add(4)),
    )?;
    let base = seed.wrapping_add(5);
    let runs = run_proxy_sweep(&mixtures, &cfg.proxy, &shards, &target, &[], base, jobs)?;

    let fit = fit_regressor(&runs, &cfg.regressor)?;
    let chosen = select_mixture(
        &fit.regressor,
        cfg.n_shards,
        cfg.pool_size,
        &mut Prng::new(seed.wrapping_add(6)),
    )?;
    let n = runs.len();
    let truth = run_proxy(
        n,
        &chosen,
        run_seed(base, n),
        &cfg.proxy,
        &shards,
        &target,
        &[],
    )?;
    let chosen_loss = if truth.diverged {
        f64::INFINITY
    } else {
        truth.val_loss
    };
    let below = runs
        .iter()
        .filter(|r| !r.diverged && r.val_loss < chosen_loss)
        .count();

    let (cross, cross_spearman) = if cfg.cross_scale > 0 {
        let wide = cfg.proxy.widened(cfg.widen);
        let k = cfg.cross_scale;
        let large = run_proxy_sweep(&mixtures[..k], &wide, &shards, &target, &[], base, jobs)?;
        let cross: Vec<(usize, f64, f64)> = runs[..k]
            .iter()
            .zip(&large)
            .map(|(a, b)| (a.index, a.val_loss, b.val_loss))
            .collect();
        let ok: Vec<&(usize, f64, f64)> = cross
            .iter()
            .filter(|c| c.1.is_finite() && c.2.is_finite())
            .collect();
        let xs: Vec<f64> = ok.iter().map(|c| c.1).collect();
        let ys: Vec<f64> = ok.iter().map(|c| c.2).collect();
        (cross.clone(), spearman(&xs, &ys))
    } else {
        (Vec::new(), None)
    };

    Ok(MixtureResult {
        chosen_predicted: fit.regressor.predict(&chosen.weights),
        training_mse: fit.training_mse,
        runs,
        chosen,
        chosen_loss,
        chosen_quantile: below as f64 / n as f64,
        cross,
        cross_spearman,
    })
}

pub fn run(cli: &Cli, args: &MixtureArgs) -> Result<Outcome> {
    let mut r = resolve::<MixtureConfig>(cli)?;
    let c = &mut r.cfg;
    c.n_mixtures = args.n_mixtures.unwrap_or(c.n_mixtures);
    c.proxy.steps = args.steps.unwrap_or(c.proxy.steps);
    c.cross_scale = args.cross_scale.unwrap_or(c.cross_scale);
    r.cfg.validate()?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let res = mixture_experiment(&cfg, r.seed, r.jobs)?;
    write_sweep_csv(&run.file("sweep.csv"), &res.runs)?;
    run.write_csv(
        "cross_scale.csv",
        &["index", "small_loss", "wide_loss"],
        &res.cross,
    )?;
    run.write_json(
        "selection.json",
        &serde_json::json!({
            "chosen": res.chosen,
            "predicted_loss": res.chosen_predicted,
            "true_loss": res.chosen_loss,
            "quantile": res.chosen_quantile,
        }),
    )?;
    run.metric("runs", res.runs.len());
    run.metric("diverged", res.runs.iter().filter(|x| x.diverged).count());
    run.metric("training_mse", res.training_mse);
    run.metric("chosen_predicted_loss", res.chosen_predicted);
    run.metric("chosen_true_loss", res.chosen_loss);
    run.metric("chosen_quantile", res.chosen_quantile);
    let best = res
        .runs
        .iter()
        .filter(|x| !x.diverged)
        .map(|x| x.val_loss)
        .fold(f64::INFINITY, f64::min);
    run.metric("best_sweep_loss", best);
    if let Some(s) = res.cross_spearman {
        run.metric("cross_scale_spearman", s);
    }
    run.finish(&cfg)?;
    Ok(Outcome::ok())
}
