use anyhow::Result;
use compass_core::stats::kl_divergence;
use compass_core::synthetic::{language_suite, render_template, TemplateFamily, TemplateRecord};
use compass_core::Prng;
use compass_mixture::{synthetic_shards, write_shards};
use compass_sft::{write_jsonl, Domain, SftRecord};
use serde::{Deserialize, Serialize};

use super::resolve;
use crate::args::{Cli, GenArgs};
use crate::config::require;
use crate::Outcome;

/// Shards at or above this size must match the generator's unigram.
pub const UNIGRAM_CHECK_TOKENS: usize = 100_000;
pub const UNIGRAM_TV_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_shards: usize,
    pub concentration: f64,
    /// Tokens per shard.
    pub n_tokens: usize,
    pub sft_samples: usize,
    /// Share of instruction records drawn from the product Q&A templates.
    pub ecommerce_share: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_shards: 16,
            concentration: 0.3,
            n_tokens: 100_000,
            sft_samples: 256,
            ecommerce_share: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnigramRow {
    pub shard: usize,
    pub label: String,
    pub tokens: usize,
    pub in_band: f64,
    pub tv_distance: f64,
    pub kl_divergence: f64,
}

/// Instruction records rendered from the templates.
pub fn template_records(n: usize, ecommerce_share: f64, rng: &mut Prng) -> Vec<SftRecord> {
    (0..n)
        .map(|_| {
            let family = if rng.uniform() < ecommerce_share {
                TemplateFamily::ProductQa
            } else {
                TemplateFamily::GeneralChat
            };
            to_record(render_template(family, rng))
        })
        .collect()
}

fn to_record(r: TemplateRecord) -> SftRecord {
    SftRecord {
        domain: if r.domain == "ecommerce" {
            Domain::Ecommerce
        } else {
            Domain::General
        },
        prompt: r.prompt,
        answer: r.answer,
        turns: r.turns,
    }
}

pub fn run(cli: &Cli, args: &GenArgs) -> Result<Outcome> {
    let mut r = resolve::<GenConfig>(cli)?;
    let c = &mut r.cfg;
    c.n_shards = args.n_shards.unwrap_or(c.n_shards);
    c.n_tokens = args.n_tokens.unwrap_or(c.n_tokens);
    c.concentration = args.concentration.unwrap_or(c.concentration);
    c.sft_samples = args.sft_samples.unwrap_or(c.sft_samples);
    require((1..=256).contains(&c.n_shards), || {
        "n_shards must be in 1..=256".into()
    })?;
    require(c.n_tokens > 0, || "n_tokens must be positive".into())?;
    require(c.concentration > 0.0, || {
        "concentration must be positive".into()
    })?;
    require((0.0..=1.0).contains(&c.ecommerce_share), || {
        "ecommerce_share must be in [0, 1]".into()
    })?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let specs = language_suite(cfg.n_shards, cfg.concentration);
    let shards = synthetic_shards(&specs, r.seed, cfg.n_tokens)?;
    run.file("shards/shards.json");
    write_shards(&run.dir.join("shards"), &shards)?;

    let mut rows = Vec::new();
    for (spec, shard) in specs.iter().zip(&shards) {
        let table = spec.markov_table().expect("language shards are Markov")?;
        let band = spec.band().expect("language shards have a band");
        let expected = table.expected_unigram();
        let mut counts = vec![0.0f64; expected.len()];
        let mut inside = 0usize;
        for &t in &shard.tokens {
            if band.contains(&t) {
                inside += 1;
                counts[(t - band.start) as usize] += 1.0;
            }
        }
        let n = shard.tokens.len() as f64;
        let empirical: Vec<f64> = counts.iter().map(|c| c / n).collect();
        let tv = empirical
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        rows.push(UnigramRow {
            shard: shard.id,
            label: shard.label.clone(),
            tokens: shard.tokens.len(),
            in_band: inside as f64 / n,
            tv_distance: tv,
            kl_divergence: kl_divergence(&empirical, &expected),
        });
    }
    run.write_csv(
        "unigram.csv",
        &[
            "shard",
            "label",
            "tokens",
            "in_band",
            "tv_distance",
            "kl_divergence",
        ],
        &rows,
    )?;

    let mut rng = Prng::new(r.seed).split(0x5F7);
    let records = template_records(cfg.sft_samples, cfg.ecommerce_share, &mut rng);
    write_jsonl(&run.file("sft.jsonl"), &records)?;

    let max_tv = rows.iter().map(|x| x.tv_distance).fold(0.0, f64::max);
    let min_in_band = rows.iter().map(|x| x.in_band).fold(1.0, f64::min);
    run.metric("shards", shards.len());
    run.metric("tokens_per_shard", cfg.n_tokens);
    run.metric("max_tv_distance", max_tv);
    run.metric(
        "max_kl_divergence",
        rows.iter().map(|x| x.kl_divergence).fold(0.0, f64::max),
    );
    run.metric("min_in_band", min_in_band);
    run.metric("sft_records", records.len());
    run.metric(
        "ecommerce_records",
        records
            .iter()
            .filter(|x| x.domain == Domain::Ecommerce)
            .count(),
    );

    let mut failures = Vec::new();
    if min_in_band < 1.0 {
        failures.push(format!(
            "a shard left its vocab band (in-band share {min_in_band})"
        ));
    }
    if cfg.n_tokens >= UNIGRAM_CHECK_TOKENS && max_tv > UNIGRAM_TV_TOL {
        failures.push(format!(
            "unigram total variation {max_tv:.4} > {UNIGRAM_TV_TOL}"
        ));
    }
    run.finish(&cfg)?;
    Ok(Outcome { failures })
}
