use std::path::PathBuf;

use anyhow::Result;
use compass_align::pairs::write_pairs_jsonl;
use compass_align::{
    precompute_ref_logprobs, separable_pairs, OtpoConfig, OtpoTrainer, RefModel, RefSource,
};
use compass_core::AdamWConfig;
use compass_moe::MoEConfig;
use serde::{Deserialize, Serialize};

use super::{initial_model, resolve, save_model, small_model};
use crate::args::{AlignArgs, Cli};
use crate::config::require;
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub model: MoEConfig,
    /// Policy and reference start from this model directory when set.
    pub init: Option<PathBuf>,
    pub pairs: usize,
    pub steps: usize,
    pub opt: AdamWConfig,
    pub otpo: OtpoConfig,
    /// Precompute reference log-probs once instead of running the reference each step.
    pub cache: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            model: small_model(),
            init: None,
            pairs: 16,
            steps: 30,
            opt: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            otpo: OtpoConfig {
                use_ot: false,
                ..OtpoConfig::default()
            },
            cache: true,
        }
    }
}

pub fn run(cli: &Cli, args: &AlignArgs) -> Result<Outcome> {
    let mut r = resolve::<AlignConfig>(cli)?;
    let c = &mut r.cfg;
    c.otpo.use_ot |= args.otpo;
    c.otpo.ot.epsilon = args.epsilon.unwrap_or(c.otpo.ot.epsilon);
    c.otpo.beta_dpo = args.beta_dpo.unwrap_or(c.otpo.beta_dpo);
    c.steps = args.steps.unwrap_or(c.steps);
    c.cache &= !args.no_cache;
    if args.init.is_some() {
        c.init = args.init.clone();
    }
    require(c.pairs > 0 && c.steps > 0, || {
        "pairs and steps must be positive".into()
    })?;
    require(c.otpo.beta_dpo > 0.0, || "beta_dpo must be positive".into())?;
    require(c.otpo.ot.epsilon > 0.0, || {
        "epsilon must be positive".into()
    })?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let policy = initial_model(cfg.init.as_deref(), &cfg.model, r.seed)?;
    let pairs = separable_pairs(cfg.pairs, r.seed);
    write_pairs_jsonl(&run.file("pairs.jsonl"), &pairs)?;
    let reference = RefModel::new(policy.clone());
    let cache = if cfg.cache {
        let c = precompute_ref_logprobs(&pairs, &reference)?;
        run.file("ref_cache");
        c.save(&run.dir.join("ref_cache"))?;
        Some(c)
    } else {
        None
    };
    let precompute = reference.forwards();
    let refs = match &cache {
        Some(c) => RefSource::Cache(c),
        None => RefSource::Model(&reference),
    };
    let mut trainer = OtpoTrainer::new(policy, cfg.opt, cfg.otpo);
    let mut logs = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        logs.push(trainer.train_step(&pairs, &refs, Some(&reference))?);
    }
    run.write_csv(
        "align_log.csv",
        &["step", "loss", "margin", "policy_forwards", "ref_forwards"],
        &logs,
    )?;
    run.file("model/model.json");
    run.file("model/model.ckpt");
    save_model(&run.dir.join("model"), &trainer.policy)?;

    let responses = (cfg.steps * 2 * pairs.len()) as f64;
    let during = reference.forwards() - precompute;
    let (first, last) = (&logs[0], &logs[logs.len() - 1]);
    run.metric(
        "objective",
        if cfg.otpo.use_ot { "otpo" } else { "token_dpo" },
    );
    run.metric("first_loss", first.loss);
    run.metric("final_loss", last.loss);
    run.metric("first_margin", first.margin);
    run.metric("final_margin", last.margin);
    run.metric("ref_forwards_precompute", precompute);
    run.metric("ref_forwards_training", during);
    run.metric(
        "policy_forwards_per_response",
        trainer.policy_forwards() as f64 / responses,
    );
    run.metric(
        "forwards_per_response",
        (trainer.policy_forwards() + during) as f64 / responses,
    );
    run.finish(&cfg)?;

    let mut failures = Vec::new();
    if cfg.cache && during != 0 {
        failures.push(format!(
            "{during} reference forwards during cached training"
        ));
    }
    if (first.loss - std::f64::consts::LN_2).abs() > 1e-9 {
        failures.push(format!(
            "initial loss {} differs from ln 2 with policy = reference",
            first.loss
        ));
    }
    Ok(Outcome { failures })
}
