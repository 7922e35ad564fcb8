//! Scalar reward model: the shared transformer, mean-pooled, with a linear
//! head, trained with a margin Bradley-Terry loss in curriculum order.

use compass_core::{AdamW, AdamWConfig, ParamId, Session, Tensor, Var};
use compass_moe::{MoeModel, NoHook, TokenBatch};
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::pairs::{PreferencePair, Scorer};
use crate::policy::sequence;

pub const HEAD: &str = "rm_head";

pub struct RewardModel {
    pub model: MoeModel,
    pub head: ParamId,
}

impl RewardModel {
    /// Adds (or resets) a zero `[d × 1]` head on top of `model`.
    pub fn from_backbone(mut model: MoeModel) -> Self {
        let d = model.cfg.d_model;
        let head = match model.params.id(HEAD) {
            Some(id) => id,
            None => model.params.add(HEAD, Tensor::zeros(&[d, 1])),
        };
        let mut rm = Self { model, head };
        rm.reset_head();
        rm
    }

    pub fn reset_head(&mut self) {
        self.model.params.get_mut(self.head).data_mut().fill(0.0);
    }

    /// `[S × d]` mean-pooled final hidden states of `BOS · prompt · response`.
    fn pooled(&self, sess: &mut Session, items: &[(&[u32], &[u32])]) -> Result<Var> {
        let seqs: Vec<Vec<u32>> = items.iter().map(|(x, y)| sequence(x, y)).collect();
        let batch = TokenBatch::from_sequences(&seqs)?;
        let fwd = self.model.forward_backbone(sess, &batch, &mut NoHook)?;
        let t = batch.len();
        let mut pool = vec![0.0f32; seqs.len() * t];
        let mut at = 0;
        for (s, seq) in seqs.iter().enumerate() {
            for p in at..at + seq.len() {
                pool[s * t + p] = 1.0 / seq.len() as f32;
            }
            at += seq.len();
        }
        let pool = sess.tape.constant(Tensor::new(vec![seqs.len(), t], pool)?);
        Ok(sess.tape.matmul(pool, fwd.normed)?)
    }

    fn scores_var(&self, sess: &mut Session, items: &[(&[u32], &[u32])]) -> Result<Var> {
        let pooled = self.pooled(sess, items)?;
        let head = sess.param(self.head);
        Ok(sess.tape.matmul(pooled, head)?)
    }

    pub fn scores(&self, items: &[(&[u32], &[u32])]) -> Result<Vec<f64>> {
        let mut sess = Session::inference(&self.model.params);
        let r = self.scores_var(&mut sess, items)?;
        Ok(sess.tape.data(r).iter().map(|&v| v as f64).collect())
    }

    /// Mean-pooled backbone embeddings, one row per item.
    pub fn embeddings(&self, items: &[(&[u32], &[u32])]) -> Result<Vec<Vec<f64>>> {
        let mut sess = Session::inference(&self.model.params);
        let p = self.pooled(&mut sess, items)?;
        let d = self.model.cfg.d_model;
        Ok(sess
            .tape
            .data(p)
            .chunks(d)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }
}

impl Scorer for RewardModel {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        Ok(self.scores(&[(prompt, response)])?[0])
    }
}

/// `−log σ(r_c − r_r − m)`.
pub fn bt_loss(r_chosen: f64, r_rejected: f64, margin: f64) -> f64 {
    let x = r_chosen - r_rejected - margin;
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// `1 − cos` between the pooled embeddings of chosen and rejected.
pub fn semantic_deviation(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let e = rm.embeddings(&[(&p.prompt, &p.chosen), (&p.prompt, &p.rejected)])?;
            Ok(1.0 - cosine(&e[0], &e[1]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    /// Most different pairs first.
    Descending,
    Ascending,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmConfig {
    pub margin: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub curriculum: Curriculum,
    pub opt: AdamWConfig,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            epochs: 4,
            batch_pairs: 8,
            curriculum: Curriculum::Descending,
            opt: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    /// Pair visiting order within every epoch.
    pub order: Vec<usize>,
    pub deviation: Vec<f64>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Visiting order; ties keep input order.
pub fn curriculum_order(deviation: &[f64], c: Curriculum) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..deviation.len()).collect();
    match c {
        Curriculum::Descending => idx.sort_by(|&a, &b| deviation[b].total_cmp(&deviation[a])),
        Curriculum::Ascending => idx.sort_by(|&a, &b| deviation[a].total_cmp(&deviation[b])),
        Curriculum::Input => {}
    }
    idx
}

/// Zeroes the head, orders pairs by semantic deviation under the starting
/// backbone, then trains backbone and head on the margin loss.
pub fn rm_train(
    rm: &mut RewardModel,
    pairs: &[PreferencePair],
    cfg: &RmConfig,
) -> Result<RmReport> {
    if !(cfg.margin >= 0.0) {
        return Err(AlignError::NegativeMargin(cfg.margin));
    }
    if pairs.is_empty() || cfg.batch_pairs == 0 {
        return Err(AlignError::InvalidArgument("no pairs to train on".into()));
    }
    rm.reset_head();
    let deviation = semantic_deviation(rm, pairs)?;
    let order = curriculum_order(&deviation, cfg.curriculum);
    let mut opt = AdamW::new(cfg.opt, &rm.model.params);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        for chunk in order.chunks(cfg.batch_pairs) {
            let items: Vec<(&[u32], &[u32])> = chunk
                .iter()
                .flat_map(|&i| {
                    let p = &pairs[i];
                    [
                        (&p.prompt[..], &p.chosen[..]),
                        (&p.prompt[..], &p.rejected[..]),
                    ]
                })
                .collect();
            let n = chunk.len();
            let mut sess = Session::train(&rm.model.params);
            let r = rm.scores_var(&mut sess, &items)?;
            let mut d = vec![0.0f32; n * 2 * n];
            for i in 0..n {
                d[i * 2 * n + 2 * i] = 1.0;
                d[i * 2 * n + 2 * i + 1] = -1.0;
            }
            let t = &mut sess.tape;
            let rv = t.data(r).to_vec();
            let dm = t.constant(Tensor::new(vec![n, 2 * n], d)?);
            let diff = t.matmul(dm, r)?;
            let m = t.constant(Tensor::full(&[n, 1], -cfg.margin as f32));
            let x = t.add(diff, m)?;
            let ls = t.log_sigmoid(x)?;
            let mean = t.mean_all(ls)?;
            let loss = t.scale(mean, -1.0)?;
            sess.backward(loss)?;
            losses.push(
                (0..n)
                    .map(|i| bt_loss(rv[2 * i] as f64, rv[2 * i + 1] as f64, cfg.margin))
                    .sum::<f64>()
                    / n as f64,
            );
            let grads = sess.param_grads();
            drop(sess);
            rm.model.params.set_grads(grads)?;
            opt.step(&mut rm.model.params)?;
        }
    }
    Ok(RmReport {
        order,
        deviation,
        losses,
    })
}

/// Fraction of pairs with `r_chosen > r_rejected`.
pub fn pairwise_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    let mut hits = 0;
    for p in pairs {
        let s = rm.scores(&[(&p.prompt, &p.chosen), (&p.prompt, &p.rejected)])?;
        hits += usize::from(s[0] > s[1]);
    }
    Ok(hits as f64 / pairs.len().max(1) as f64)
}

/// Token that marks preferred responses in [`separable_pairs`].
pub const MARKER: u32 = b'#' as u32;

/// Preference pairs separable by construction: chosen responses contain
/// [`MARKER`] once, rejected ones never do. Other tokens are uniform over
/// 16 lowercase letters.
pub fn separable_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
    let mut rng = compass_core::Prng::new(seed).split(0x5E9);
    let toks = |rng: &mut compass_core::Prng, len: usize| -> Vec<u32> {
        (0..len)
            .map(|_| b'a' as u32 + rng.below(16) as u32)
            .collect()
    };
    (0..n)
        .map(|_| {
            let lp = 3 + rng.below(4) as usize;
            let prompt = toks(&mut rng, lp);
            let lc = 5 + rng.below(6) as usize;
            let mut chosen = toks(&mut rng, lc);
            let at = rng.below(lc as u64 + 1) as usize;
            chosen.insert(at, MARKER);
            let lr = 6 + rng.below(6) as usize;
            let rejected = toks(&mut rng, lr);
            PreferencePair {
                prompt,
                chosen,
                rejected,
                chosen_source: crate::pairs::Source::OffPolicy,
                rejected_source: crate::pairs::Source::OnPolicy,
                domain: crate::pairs::AlignDomain::Ecommerce,
            }
        })
        .collect()
}
