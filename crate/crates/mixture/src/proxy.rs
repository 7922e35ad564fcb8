use std::path::Path;

use compass_core::{prng::mix64, AdamWConfig, Prng};
use compass_moe::{sample_windows, MoEConfig, MoeModel, TokenBatch, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_proxy_corpus, Shard};
use crate::error::{MixtureError, Result};
use crate::mixture::MixtureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub model: MoEConfig,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub token_budget: usize,
    pub opt: AdamWConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            model: MoEConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                n_experts: 4,
                top_k: 2,
                d_ff: 16,
                max_seq_len: 16,
                mtp_depth: 0,
                ..MoEConfig::default()
            },
            steps: 80,
            batch: 8,
            seq_len: 16,
            token_budget: 8192,
            opt: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
        }
    }
}

impl ProxyConfig {
    /// The same recipe with model width multiplied by `factor` (about
    /// `factor²` times the non-embedding parameters).
    pub fn widened(&self, factor: usize) -> Self {
        let mut c = self.clone();
        c.model.d_model *= factor;
        c.model.d_ff *= factor;
        c
    }
}

/// Non-overlapping `seq_len` windows from the start of `stream`.
pub fn eval_batch(stream: &[u32], seq_len: usize, max_windows: usize) -> Result<TokenBatch> {
    let seqs: Vec<Vec<u32>> = stream
        .chunks_exact(seq_len)
        .take(max_windows)
        .map(<[u32]>::to_vec)
        .collect();
    Ok(TokenBatch::from_sequences(&seqs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRun {
    pub index: usize,
    pub mixture: MixtureSpec,
    pub seed: u64,
    /// Loss on the target stream; NaN when diverged.
    pub val_loss: f64,
    /// Losses on the additional evaluation sets, in the order given.
    pub scores: Vec<f64>,
    pub diverged: bool,
}

/// Seed of run `index` in a sweep with base seed `base`.
pub fn run_seed(base: u64, index: usize) -> u64 {
    mix64(base ^ mix64(index as u64 + 1))
}

/// Trains one proxy on `mixture` and evaluates it. A non-finite loss or
/// update marks the run diverged instead of failing.
pub fn run_proxy(
    index: usize,
    mixture: &MixtureSpec,
    seed: u64,
    cfg: &ProxyConfig,
    shards: &[Shard],
    target: &TokenBatch,
    extra: &[TokenBatch],
) -> Result<ProxyRun> {
    let rng = Prng::new(seed);
    let corpus = build_proxy_corpus(mixture, cfg.token_budget, shards, &mut rng.split(1))?;
    let model = MoeModel::init(cfg.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, cfg.opt);
    let mut batches = rng.split(2);
    let mut run = ProxyRun {
        index,
        mixture: mixture.clone(),
        seed,
        val_loss: f64::NAN,
        scores: vec![f64::NAN; extra.len()],
        diverged: false,
    };
    for _ in 0..cfg.steps {
        let b = sample_windows(&corpus, cfg.batch, cfg.seq_len, &mut batches)?;
        match trainer.train_step(&b) {
            Ok(log) if log.l_lm.is_finite() => {}
            Ok(_) | Err(compass_moe::MoeError::Core(compass_core::CoreError::NonFinite { .. })) => {
                run.diverged = true;
                return Ok(run);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let eval = |b: &TokenBatch| -> Result<f64> { Ok(trainer.model.lm_forward(b)?.l_lm) };
    run.val_loss = eval(target)?;
    run.scores = extra.iter().map(eval).collect::<Result<_>>()?;
    run.diverged = !run.val_loss.is_finite();
    Ok(run)
}

/// One independently seeded proxy per mixture, on `jobs` threads. The
/// result is in mixture order and does not depend on `jobs`.
pub fn run_proxy_sweep(
    mixtures: &[MixtureSpec],
    cfg: &ProxyConfig,
    shards: &[Shard],
    target: &TokenBatch,
    extra: &[TokenBatch],
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<ProxyRun>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| MixtureError::InvalidArgument(e.to_string()))?;
    pool.install(|| {
        mixtures
            .par_iter()
            .enumerate()
            .map(|(i, m)| run_proxy(i, m, run_seed(base_seed, i), cfg, shards, target, extra))
            .collect()
    })
}

/// Columns `w0..w{S-1}, seed, val_loss, diverged`.
pub fn write_sweep_csv(path: &Path, runs: &[ProxyRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let s = runs.first().map_or(0, |r| r.mixture.len());
    let mut header: Vec<String> = (0..s).map(|i| format!("w{i}")).collect();
    header.extend(["seed", "val_loss", "diverged"].map(String::from));
    w.write_record(&header)?;
    for r in runs {
        let mut row: Vec<String> = r
            .mixture
            .weights
            .iter()
            .map(|x| format!("{x:.12}"))
            .collect();
        row.push(r.seed.to_string());
        row.push(format!("{:.9}", r.val_loss));
        row.push(r.diverged.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
