use std::path::PathBuf;

use anyhow::Result;
use compass_core::synthetic::language_suite;
use compass_core::{AdamWConfig, Prng};
use compass_mixture::{load_shards, synthetic_shards, Shard};
use compass_moe::{sample_windows, MoEConfig, TokenBatch, Trainer};
use serde::{Deserialize, Serialize};

use super::{lm_model, resolve, save_model};
use crate::args::{Cli, PretrainArgs};
use crate::config::{config_error, require};
use crate::Outcome;

pub const STEP_HEADER: [&str; 8] = [
    "step",
    "L_LM",
    "L_aux",
    "L_Z",
    "L_MTP",
    "alpha",
    "beta",
    "expert_usage_entropy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: MoEConfig,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub opt: AdamWConfig,
    /// `shards.json` from gen-synthetic; generated in memory when absent.
    pub shards: Option<PathBuf>,
    pub n_shards: usize,
    pub tokens_per_shard: usize,
    pub concentration: f64,
    /// The tail of every shard held out for evaluation.
    pub heldout_fraction: f64,
    pub eval_windows: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: lm_model(),
            steps: 200,
            batch: 8,
            seq_len: 32,
            opt: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            shards: None,
            n_shards: 4,
            tokens_per_shard: 20_000,
            concentration: 0.3,
            heldout_fraction: 0.1,
            eval_windows: 32,
        }
    }
}

/// Training stream and held-out windows from the shard tails.
pub fn split_shards(
    shards: &[Shard],
    heldout_fraction: f64,
    seq_len: usize,
    eval_windows: usize,
) -> Result<(Vec<u32>, TokenBatch)> {
    let per_shard = eval_windows.div_ceil(shards.len().max(1));
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in shards {
        let cut = s.tokens.len() - ((s.tokens.len() as f64 * heldout_fraction) as usize);
        train.extend_from_slice(&s.tokens[..cut]);
        eval.extend(
            s.tokens[cut..]
                .chunks_exact(seq_len)
                .take(per_shard)
                .map(<[u32]>::to_vec),
        );
    }
    eval.truncate(eval_windows);
    if eval.is_empty() || train.len() < seq_len {
        return Err(config_error(
            "shards too short for the requested split and sequence length",
        ));
    }
    Ok((train, TokenBatch::from_sequences(&eval)?))
}

pub fn run(cli: &Cli, args: &PretrainArgs) -> Result<Outcome> {
    let mut r = resolve::<PretrainConfig>(cli)?;
    let c = &mut r.cfg;
    c.steps = args.steps.unwrap_or(c.steps);
    c.opt.lr = args.lr.unwrap_or(c.opt.lr);
    if args.shards.is_some() {
        c.shards = args.shards.clone();
    }
    require(c.steps > 0 && c.batch > 0, || {
        "steps and batch must be positive".into()
    })?;
    require(c.seq_len >= 2 && c.seq_len <= c.model.max_seq_len, || {
        "need 2 <= seq_len <= model.max_seq_len".into()
    })?;
    require((0.0..1.0).contains(&c.heldout_fraction), || {
        "heldout_fraction must be in [0, 1)".into()
    })?;
    require((1..=16).contains(&c.n_shards), || {
        "n_shards must be in 1..=16".into()
    })?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let shards = match &cfg.shards {
        Some(p) => load_shards(p)?,
        None => synthetic_shards(
            &language_suite(16, cfg.concentration)[..cfg.n_shards],
            r.seed,
            cfg.tokens_per_shard,
        )?,
    };
    let (stream, eval) =
        split_shards(&shards, cfg.heldout_fraction, cfg.seq_len, cfg.eval_windows)?;
    let model = super::initial_model(None, &cfg.model, r.seed)?;
    let initial = model.lm_forward(&eval)?;
    let mut trainer = Trainer::new(model, cfg.opt);
    let mut rng = Prng::new(r.seed).split(1);
    let mut logs = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let b = sample_windows(&stream, cfg.batch, cfg.seq_len, &mut rng)?;
        logs.push(trainer.train_step(&b)?);
    }
    run.write_csv("train_log.csv", &STEP_HEADER, &logs)?;
    let last = logs.last().expect("steps > 0");
    let fin = trainer.model.lm_forward(&eval)?;
    run.file("model/model.json");
    run.file("model/model.ckpt");
    save_model(&run.dir.join("model"), &trainer.model)?;

    run.metric("steps", cfg.steps);
    run.metric("parameters", trainer.model.params.num_values());
    run.metric("train_tokens", stream.len());
    run.metric("final_train_l_lm", last.l_lm);
    run.metric("initial_eval_loss", initial.l_lm);
    run.metric("eval_loss", fin.l_lm);
    run.metric("eval_usage_entropy", fin.usage_entropy);
    run.finish(&cfg)?;
    let mut failures = Vec::new();
    if !fin.l_lm.is_finite() {
        failures.push("evaluation loss is not finite".into());
    }
    Ok(Outcome { failures })
}
