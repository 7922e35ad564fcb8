use std::path::PathBuf;

use anyhow::Result;
use compass_core::{AdamWConfig, Prng};
use compass_moe::{MoEConfig, Trainer};
use compass_sft::{encode, pack_samples, read_jsonl, sft_loss, sft_step, Domain, SftSample};
use serde::{Deserialize, Serialize};

use super::{
    gen::template_records, initial_model, lm_model, pretrain::STEP_HEADER, resolve, save_model,
};
use crate::args::{Cli, SftArgs};
use crate::config::require;
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Shape of a fresh model; ignored when `init` is set.
    pub model: MoEConfig,
    pub init: Option<PathBuf>,
    /// JSON Lines records; rendered from templates when absent.
    pub data: Option<PathBuf>,
    pub samples: usize,
    pub ecommerce_share: f64,
    pub max_len: usize,
    pub steps: usize,
    pub packs_per_step: usize,
    pub opt: AdamWConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            model: lm_model(),
            init: None,
            data: None,
            samples: 256,
            ecommerce_share: 0.5,
            max_len: 128,
            steps: 60,
            packs_per_step: 4,
            opt: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

pub fn run(cli: &Cli, args: &SftArgs) -> Result<Outcome> {
    let mut r = resolve::<SftConfig>(cli)?;
    let c = &mut r.cfg;
    c.steps = args.steps.unwrap_or(c.steps);
    c.opt.lr = args.lr.unwrap_or(c.opt.lr);
    c.max_len = args.max_len.unwrap_or(c.max_len);
    if args.init.is_some() {
        c.init = args.init.clone();
    }
    if args.data.is_some() {
        c.data = args.data.clone();
    }
    require(c.steps > 0 && c.packs_per_step > 0, || {
        "steps and packs_per_step must be positive".into()
    })?;
    require(c.max_len >= 2, || "max_len must be at least 2".into())?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let model = initial_model(cfg.init.as_deref(), &cfg.model, r.seed)?;
    require(cfg.max_len <= model.cfg.max_seq_len, || {
        format!(
            "max_len {} exceeds the model's max_seq_len {}",
            cfg.max_len, model.cfg.max_seq_len
        )
    })?;
    let records = match &cfg.data {
        Some(p) => read_jsonl(p)?,
        None => template_records(
            cfg.samples,
            cfg.ecommerce_share,
            &mut Prng::new(r.seed).split(0x5F7),
        ),
    };
    let samples: Vec<SftSample> = records.iter().map(encode).collect();
    let packs = pack_samples(&samples, cfg.max_len)?;
    let used: usize = packs.iter().map(|p| p.used()).sum();
    let total: usize = samples.iter().map(SftSample::len).sum();

    let initial = sft_loss(&model, &packs)?;
    let mut trainer = Trainer::new(model, cfg.opt);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.packs_per_step.min(packs.len()))
            .map(|i| packs[(step * cfg.packs_per_step + i) % packs.len()].clone())
            .collect();
        logs.push(sft_step(&mut trainer, &batch)?);
    }
    run.write_csv("sft_log.csv", &STEP_HEADER, &logs)?;
    let fin = sft_loss(&trainer.model, &packs)?;
    run.file("model/model.json");
    run.file("model/model.ckpt");
    save_model(&run.dir.join("model"), &trainer.model)?;

    let pads: usize = packs.iter().map(|p| p.pad_count).sum();
    run.metric("samples", samples.len());
    run.metric(
        "ecommerce_samples",
        samples
            .iter()
            .filter(|s| s.domain == Domain::Ecommerce)
            .count(),
    );
    run.metric("packs", packs.len());
    run.metric(
        "pad_fraction",
        pads as f64 / (packs.len() * cfg.max_len).max(1) as f64,
    );
    run.metric("sample_tokens", total);
    run.metric("packed_tokens", used);
    run.metric(
        "loss_positions",
        packs
            .iter()
            .map(|p| p.loss_mask.iter().filter(|&&m| m).count())
            .sum::<usize>(),
    );
    run.metric("initial_loss", initial);
    run.metric("final_loss", fin);
    run.finish(&cfg)?;
    let mut failures = Vec::new();
    if used != total {
        failures.push(format!("packing kept {used} of {total} tokens"));
    }
    Ok(Outcome { failures })
}
