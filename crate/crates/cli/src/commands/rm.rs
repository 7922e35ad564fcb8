use std::path::PathBuf;

use anyhow::Result;
use compass_align::{pairwise_accuracy, rm_train, separable_pairs, RewardModel, RmConfig};
use compass_moe::MoEConfig;
use serde::{Deserialize, Serialize};

use super::{initial_model, resolve, save_model, small_model};
use crate::args::{Cli, RmArgs};
use crate::config::require;
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmTrainConfig {
    pub model: MoEConfig,
    /// Backbone directory; a fresh backbone otherwise.
    pub init: Option<PathBuf>,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub rm: RmConfig,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            model: small_model(),
            init: None,
            train_pairs: 256,
            eval_pairs: 128,
            rm: RmConfig::default(),
        }
    }
}

/// `−log σ(−m)`: the first batch loss with a zero head.
pub fn initial_rm_loss(margin: f64) -> f64 {
    margin.exp().ln_1p()
}

pub fn run(cli: &Cli, args: &RmArgs) -> Result<Outcome> {
    let mut r = resolve::<RmTrainConfig>(cli)?;
    let c = &mut r.cfg;
    c.rm.margin = args.margin.unwrap_or(c.rm.margin);
    c.rm.epochs = args.epochs.unwrap_or(c.rm.epochs);
    if args.init.is_some() {
        c.init = args.init.clone();
    }
    require(c.rm.margin >= 0.0, || {
        format!("margin must be nonnegative, got {}", c.rm.margin)
    })?;
    require(c.train_pairs > 0 && c.eval_pairs > 0, || {
        "train_pairs and eval_pairs must be positive".into()
    })?;
    require(c.rm.epochs > 0 && c.rm.batch_pairs > 0, || {
        "epochs and batch_pairs must be positive".into()
    })?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let backbone = initial_model(cfg.init.as_deref(), &cfg.model, r.seed)?;
    let train = separable_pairs(cfg.train_pairs, r.seed.wrapping_add(1));
    let held_out = separable_pairs(cfg.eval_pairs, r.seed.wrapping_add(2));
    let mut rm = RewardModel::from_backbone(backbone);
    let report = rm_train(&mut rm, &train, &cfg.rm)?;
    let rows: Vec<(usize, f64)> = report.losses.iter().copied().enumerate().collect();
    run.write_csv("rm_log.csv", &["step", "loss"], &rows)?;
    run.file("model/model.json");
    run.file("model/model.ckpt");
    save_model(&run.dir.join("model"), &rm.model)?;

    let want = initial_rm_loss(cfg.rm.margin);
    run.metric("initial_loss", report.losses[0]);
    run.metric("analytic_initial_loss", want);
    run.metric(
        "final_loss",
        *report.losses.last().expect("at least one step"),
    );
    run.metric("train_accuracy", pairwise_accuracy(&rm, &train)?);
    run.metric("heldout_accuracy", pairwise_accuracy(&rm, &held_out)?);
    run.finish(&cfg)?;
    let mut failures = Vec::new();
    if (report.losses[0] - want).abs() > 1e-9 {
        failures.push(format!(
            "initial loss {} vs analytic {want}",
            report.losses[0]
        ));
    }
    Ok(Outcome { failures })
}
