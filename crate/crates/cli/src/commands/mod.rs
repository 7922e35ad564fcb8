//! Subcommand implementations.

pub mod align;
pub mod eval;
pub mod gen;
pub mod mixture;
pub mod plan;
pub mod pretrain;
pub mod quantize;
pub mod rm;
pub mod sft;

use std::path::Path;

use anyhow::{Context, Result};
use compass_core::checkpoint;
use compass_moe::{MoEConfig, MoeModel};
use serde::de::DeserializeOwned;

use crate::args::{Cli, Command};
use crate::config::{self, require};
use crate::{Outcome, Run};

pub fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::GenSynthetic(a) => gen::run(cli, a),
        Command::Pretrain(a) => pretrain::run(cli, a),
        Command::Sft(a) => sft::run(cli, a),
        Command::Align(a) => align::run(cli, a),
        Command::RmTrain(a) => rm::run(cli, a),
        Command::MixtureSearch(a) => mixture::run(cli, a),
        Command::Quantize(a) => quantize::run(cli, a),
        Command::PlanParallel(a) => plan::run(cli, a),
        Command::Eval(a) => eval::run(cli, a),
        Command::Acceptance(a) => crate::acceptance::run(cli, a),
    }
}

/// Config file values with the global flags applied; flags win.
pub struct Resolved<T> {
    pub cfg: T,
    pub seed: u64,
    pub jobs: usize,
}

pub fn resolve<T: DeserializeOwned + Default>(cli: &Cli) -> Result<Resolved<T>> {
    let loaded = config::load::<T>(cli.config.as_deref())?;
    let seed = cli.seed.or(loaded.seed).unwrap_or(0);
    let jobs = cli.jobs.or(loaded.jobs).unwrap_or(1);
    require(jobs >= 1, || "jobs must be at least 1".into())?;
    Ok(Resolved {
        cfg: loaded.body,
        seed,
        jobs,
    })
}

impl<T> Resolved<T> {
    pub fn start(&self, cli: &Cli) -> Result<Run> {
        Run::create(cli.command.name(), &cli.out, self.seed, self.jobs)
    }
}

pub const MODEL_CONFIG: &str = "model.json";
pub const MODEL_WEIGHTS: &str = "model.ckpt";

/// `model.json` (the config) and `model.ckpt` (the weights) under `dir`.
pub fn save_model(dir: &Path, model: &MoeModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(MODEL_CONFIG),
        serde_json::to_vec_pretty(&model.cfg)?,
    )?;
    checkpoint::save(&model.params, &dir.join(MODEL_WEIGHTS))?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<MoeModel> {
    let path = dir.join(MODEL_CONFIG);
    let cfg: MoEConfig = serde_json::from_slice(
        &std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
    )
    .with_context(|| format!("parsing {}", path.display()))?;
    let params = checkpoint::load(&dir.join(MODEL_WEIGHTS))
        .with_context(|| format!("loading weights from {}", dir.display()))?;
    Ok(MoeModel::from_params(cfg, params)?)
}

/// The initial model: loaded from `init` when given, else freshly seeded.
pub fn initial_model(init: Option<&Path>, cfg: &MoEConfig, seed: u64) -> Result<MoeModel> {
    match init {
        Some(dir) => load_model(dir),
        None => {
            cfg.validate()
                .map_err(|e| config::config_error(format!("model: {e}")))?;
            Ok(MoeModel::init(cfg.clone(), seed)?)
        }
    }
}

/// Model shape used by the language-modeling commands.
pub fn lm_model() -> MoEConfig {
    MoEConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        n_experts: 8,
        top_k: 2,
        d_ff: 32,
        max_seq_len: 128,
        mtp_depth: 1,
        ..MoEConfig::default()
    }
}

/// Small model used by the alignment commands.
pub fn small_model() -> MoEConfig {
    MoEConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_experts: 4,
        top_k: 2,
        d_ff: 16,
        max_seq_len: 40,
        ..MoEConfig::default()
    }
}
