use std::path::PathBuf;

use anyhow::Result;
use compass_core::synthetic::{gen_synthetic, language_suite};
use compass_core::Prng;
use compass_moe::MoEConfig;
use compass_quant::{quantize_recipe, Grid, QuantConfig, QuantError, Recipe};
use serde::{Deserialize, Serialize};

use super::{initial_model, lm_model, resolve};
use crate::args::{Cli, EvalArgs};
use crate::eval::{default_suites, eval_report, write_eval_csv, EvalSuite, SuiteConfig};
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Shape of a fresh model; ignored when `model_dir` is set.
    pub model: MoEConfig,
    pub model_dir: Option<PathBuf>,
    /// Explicit suites; the default language and instruction suites otherwise.
    pub suites: Option<Vec<EvalSuite>>,
    pub default_suites: SuiteConfig,
    /// Also evaluate a copy quantized on this grid, calibrated on the suites.
    pub grid: Option<Grid>,
    pub quant: QuantConfig,
    /// Balance calibration and smooth activations before quantizing.
    pub expert_aware: bool,
    /// Extra sequences the balancer may draw from to reach rarely routed experts.
    pub pool_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            model: lm_model(),
            model_dir: None,
            suites: None,
            default_suites: SuiteConfig::default(),
            grid: None,
            quant: QuantConfig::default(),
            expert_aware: true,
            pool_sequences: 512,
        }
    }
}

pub fn run(cli: &Cli, args: &EvalArgs) -> Result<Outcome> {
    let mut r = resolve::<EvalConfig>(cli)?;
    let c = &mut r.cfg;
    if args.model.is_some() {
        c.model_dir = args.model.clone();
    }
    if let Some(g) = args.grid {
        c.grid = Some(g.into());
    }
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let model = initial_model(cfg.model_dir.as_deref(), &cfg.model, r.seed)?;
    let suites = match &cfg.suites {
        Some(s) => s.clone(),
        None => default_suites(&cfg.default_suites, r.seed.wrapping_add(1))?,
    };
    let rows = eval_report(&model, &suites)?;
    write_eval_csv(&run.file("eval.csv"), &rows)?;
    run.metric("rows", rows.len());
    let scored: Vec<_> = rows.iter().filter(|x| x.tokens > 0).collect();
    let tokens: usize = scored.iter().map(|x| x.tokens).sum();
    let mean = |f: fn(&crate::eval::EvalRow) -> f64| {
        scored.iter().map(|x| f(x) * x.tokens as f64).sum::<f64>() / tokens.max(1) as f64
    };
    run.metric("tokens", tokens);
    run.metric("mean_loss", mean(|x| x.loss));
    run.metric("mean_accuracy", mean(|x| x.accuracy));

    if let Some(grid) = cfg.grid {
        let calib: Vec<Vec<u32>> = suites
            .iter()
            .flat_map(|s| s.slices.iter().flat_map(|x| x.sequences.clone()))
            .collect();
        let q = QuantConfig {
            grid,
            ..cfg.quant.clone()
        };
        let seq_len = cfg.default_suites.seq_len.min(model.cfg.max_seq_len);
        let pool = calibration_pool(cfg.pool_sequences, seq_len, r.seed.wrapping_add(2))?;
        let all: Vec<Vec<u32>> = calib.iter().chain(&pool).cloned().collect();
        let attempt = if cfg.expert_aware {
            quantize_recipe(&model, &calib, &pool, &q, Recipe::EXPERT_AWARE)
        } else {
            quantize_recipe(&model, &all, &[], &q, Recipe::NAIVE)
        };
        let recipe = if cfg.expert_aware {
            Recipe::EXPERT_AWARE
        } else {
            Recipe::NAIVE
        };
        let (out, tau_reached) = match attempt {
            Ok(o) => (o, cfg.expert_aware),
            // a trained router may starve an expert below tau; calibrate on everything instead
            Err(QuantError::Unbalanced { .. }) => {
                let smooth_only = Recipe {
                    balance: false,
                    smooth: true,
                };
                (quantize_recipe(&model, &all, &[], &q, smooth_only)?, false)
            }
            Err(e) => return Err(e.into()),
        };
        run.metric(
            "recipe",
            if tau_reached || !cfg.expert_aware {
                recipe.label()
            } else {
                "smoothed"
            },
        );
        run.metric("tau_reached", tau_reached);
        run.metric(
            "calibration_sequences_added",
            out.balanced.as_ref().map_or(0, |b| b.added.len()),
        );
        let qrows = eval_report(&out.qmodel, &suites)?;
        write_eval_csv(&run.file("eval_quantized.csv"), &qrows)?;
        let delta = rows
            .iter()
            .zip(&qrows)
            .filter(|(a, _)| a.tokens > 0)
            .map(|(a, b)| (a.loss - b.loss).abs().max((a.accuracy - b.accuracy).abs()))
            .fold(0.0, f64::max);
        run.metric("max_quantized_row_delta", delta);
    }
    run.finish(&cfg)?;
    Ok(Outcome::ok())
}

/// Windows of every synthetic language interleaved with uniform random
/// bytes, `n` sequences of `seq_len` tokens.
pub fn calibration_pool(n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let langs = language_suite(16, 0.3);
    let per = n.div_ceil(langs.len() + 1);
    let mut texts = Vec::with_capacity(langs.len());
    for (i, spec) in langs.iter().enumerate() {
        texts.push(gen_synthetic(
            spec,
            seed.wrapping_add(i as u64),
            per * seq_len,
        )?);
    }
    let mut rng = Prng::new(seed).split(0xCA1);
    let mut pool = Vec::with_capacity(n);
    for k in 0..per {
        for t in &texts {
            pool.push(t[k * seq_len..(k + 1) * seq_len].to_vec());
        }
        pool.push((0..seq_len).map(|_| rng.below(256) as u32).collect());
    }
    pool.truncate(n);
    Ok(pool)
}
