//! A constructed MoE model with one rarely routed expert and one outlier
//! activation channel, plus matching calibration, pool and eval data.

use compass_core::synthetic::{gen_synthetic, language_suite};
use compass_core::{Prng, Tensor};
use compass_moe::{MoEConfig, MoeModel};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::report::EvalSlice;

/// Channel that carries the routing signal.
const ROUTE_CHANNEL: usize = 1;
/// Channel whose FFN-norm gain is inflated.
const OUTLIER_CHANNEL: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkewConfig {
    pub seed: u64,
    pub d_model: usize,
    /// One synthetic language per expert; the last language is rare and is
    /// the only one routed to the last expert.
    pub n_experts: usize,
    pub top_k: usize,
    pub seq_len: usize,
    /// Calibration sequences per common language.
    pub calib_common: usize,
    /// Calibration sequences of the rare language.
    pub calib_rare: usize,
    /// Pool sequences per language.
    pub pool_per_slice: usize,
    /// Evaluation sequences per language.
    pub eval_per_slice: usize,
    /// Gain multiplier on the outlier channel (weights absorb its inverse).
    pub outlier: f32,
    /// Router weight on the routing channel for the rare expert.
    pub route_gain: f32,
    /// Upper end of the per-token spike added to one channel of each
    /// rare-language embedding, so the rare expert's input range is only
    /// seen with enough calibration tokens.
    pub rare_spike: f32,
}

impl Default for SkewConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_model: 16,
            n_experts: 4,
            top_k: 2,
            seq_len: 32,
            calib_common: 21,
            calib_rare: 1,
            pool_per_slice: 16,
            eval_per_slice: 16,
            outlier: 131072.0,
            route_gain: 8.0,
            rare_spike: 12.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkewScenario {
    pub model: MoeModel,
    pub calib: Vec<Vec<u32>>,
    pub pool: Vec<Vec<u32>>,
    pub eval: Vec<EvalSlice>,
    pub rare_slice: String,
    pub rare_expert: usize,
}

fn sequences(tokens: &[u32], seq_len: usize, n: usize) -> Vec<Vec<u32>> {
    tokens
        .chunks(seq_len)
        .take(n)
        .map(<[u32]>::to_vec)
        .collect()
}

impl SkewScenario {
    pub fn build(cfg: &SkewConfig) -> Result<Self> {
        let n = cfg.n_experts;
        let d = cfg.d_model;
        let mcfg = MoEConfig {
            d_model: d,
            n_layers: 1,
            n_heads: 2,
            n_experts: n,
            top_k: cfg.top_k,
            d_ff: 2 * d,
            max_seq_len: cfg.seq_len,
            mtp_depth: 0,
            ..MoEConfig::default()
        };
        let mut model = MoeModel::init(mcfg, cfg.seed)?;
        let mut rng = Prng::new(cfg.seed).split(0x5EED);
        let suite = language_suite(n, 0.3);
        let rare_band = suite[n - 1].band().expect("markov shard");
        let vocab = model.cfg.vocab_size;
        let ids = model.ids.clone();
        let layer = &ids.layers[0];

        // unit-scale embeddings; the routing channel is ±3 by language
        let mut emb = Tensor::randn(&[vocab, d], 1.0, &mut rng).into_data();
        for (tok, row) in emb.chunks_mut(d).enumerate() {
            let rare = rare_band.contains(&(tok as u32));
            row[ROUTE_CHANNEL] = if rare { 3.0 } else { -3.0 };
            if rare {
                let c = 2 + rng.below((d - 2) as u64) as usize;
                row[c] += cfg.rare_spike * rng.uniform() as f32;
            }
        }
        model.params.assign(ids.tok_emb, &emb)?;
        let head = Tensor::randn(&[d, vocab], 1.0 / (d as f32).sqrt(), &mut rng);
        model.params.assign(ids.lm_head, head.data())?;
        let mut pos = Tensor::randn(&[cfg.seq_len, d], 0.5, &mut rng).into_data();
        pos.chunks_mut(d).for_each(|r| r[ROUTE_CHANNEL] = 0.0);
        model.params.assign(ids.pos_emb, &pos)?;
        // attention never writes the routing channel
        let mut wo = model.params.get(layer.wo).data().to_vec();
        wo.chunks_mut(d).for_each(|r| r[ROUTE_CHANNEL] = 0.0);
        model.params.assign(layer.wo, &wo)?;

        let router_id = layer.router.expect("moe layer");
        let mut router = model.params.get(router_id).data().to_vec();
        for (j, row) in router.chunks_mut(n).enumerate() {
            for (e, w) in row.iter_mut().enumerate() {
                if e == n - 1 {
                    *w = if j == ROUTE_CHANNEL {
                        cfg.route_gain
                    } else {
                        0.0
                    };
                } else if j == ROUTE_CHANNEL {
                    *w = 0.0;
                }
            }
        }
        model.params.assign(router_id, &router)?;

        // the outlier: gain × c on one channel, matching input rows ÷ c
        let mut gain = model.params.get(layer.ffn_norm).data().to_vec();
        gain[OUTLIER_CHANNEL] *= cfg.outlier;
        model.params.assign(layer.ffn_norm, &gain)?;
        let mut shrink = |id| -> Result<()> {
            let mut w = model.params.get(id).data().to_vec();
            let cols = w.len() / d;
            w[OUTLIER_CHANNEL * cols..(OUTLIER_CHANNEL + 1) * cols]
                .iter_mut()
                .for_each(|v| *v /= cfg.outlier);
            model.params.assign(id, &w)?;
            Ok(())
        };
        shrink(router_id)?;
        for e in &layer.experts {
            shrink(e.w_gate)?;
            shrink(e.w_up)?;
        }

        let per_lang =
            cfg.calib_common.max(cfg.calib_rare) + cfg.pool_per_slice + cfg.eval_per_slice;
        let mut calib = Vec::new();
        let mut pool_by = Vec::new();
        let mut eval = Vec::new();
        for (i, spec) in suite.iter().enumerate() {
            let toks = gen_synthetic(
                spec,
                cfg.seed.wrapping_add(100 + i as u64),
                per_lang * cfg.seq_len,
            )?;
            let seqs = sequences(&toks, cfg.seq_len, per_lang);
            let n_cal = if i == n - 1 {
                cfg.calib_rare
            } else {
                cfg.calib_common
            };
            calib.extend(seqs[..n_cal].iter().cloned());
            let rest = &seqs[cfg.calib_common.max(cfg.calib_rare)..];
            pool_by.push(rest[..cfg.pool_per_slice].to_vec());
            eval.push(EvalSlice {
                label: spec.label.clone(),
                sequences: rest[cfg.pool_per_slice..].to_vec(),
            });
        }
        // interleave the pool so no language comes first
        let mut pool = Vec::new();
        for k in 0..cfg.pool_per_slice {
            pool.extend(pool_by.iter().map(|p| p[k].clone()));
        }
        Ok(Self {
            model,
            calib,
            pool,
            rare_slice: suite[n - 1].label.clone(),
            eval,
            rare_expert: n - 1,
        })
    }
}
