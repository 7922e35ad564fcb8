//! Token-weighted DPO with weights from optimal transport.

use std::sync::atomic::{AtomicU64, Ordering};

use compass_core::{AdamW, AdamWConfig, Session, Tensor};
use compass_moe::MoeModel;
use serde::{Deserialize, Serialize};

use crate::cache::{RefLogProbCache, RefModel};
use crate::error::{AlignError, Result};
use crate::ot::{otpo_weights, OtConfig, TokenWeights};
use crate::pairs::PreferencePair;
use crate::policy::response_forward;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtpoConfig {
    pub beta_dpo: f64,
    /// Off: uniform weights, i.e. length-normalized token DPO.
    pub use_ot: bool,
    pub ot: OtConfig,
}

impl Default for OtpoConfig {
    fn default() -> Self {
        Self {
            beta_dpo: 0.1,
            use_ot: true,
            ot: OtConfig::default(),
        }
    }
}

/// Where reference log-probs come from during training.
pub enum RefSource<'a> {
    Cache(&'a RefLogProbCache),
    /// Runs the reference model every time; the baseline the cache replaces.
    Model(&'a RefModel),
}

impl RefSource<'_> {
    pub fn logprobs(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<f32>> {
        match self {
            RefSource::Cache(c) => c.get(prompt, response).map(<[f32]>::to_vec),
            RefSource::Model(m) => m.logprobs(prompt, response),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `−log σ(β·(⟨w_c, δ_c⟩ − ⟨w_r, δ_r⟩))` with `δ = log π_θ − log π_ref`.
pub fn weighted_dpo_loss(delta_c: &[f64], delta_r: &[f64], w: &TokenWeights, beta: f64) -> f64 {
    softplus(-beta * (dot(&w.chosen, delta_c) - dot(&w.rejected, delta_r)))
}

/// Token DPO with each response's log-ratio averaged over its tokens.
pub fn mean_token_dpo_loss(delta_c: &[f64], delta_r: &[f64], beta: f64) -> f64 {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    softplus(-beta * (mean(delta_c) - mean(delta_r)))
}

fn deltas(policy: &[f32], reference: &[f32]) -> Result<Vec<f64>> {
    if policy.len() != reference.len() {
        return Err(AlignError::Cache(format!(
            "{} reference log-probs for {} tokens",
            reference.len(),
            policy.len()
        )));
    }
    Ok(policy
        .iter()
        .zip(reference)
        .map(|(&p, &r)| p as f64 - r as f64)
        .collect())
}

/// Graph and report values for one pair.
struct PairTerm {
    log_sigmoid: compass_core::Var,
    loss: f64,
    margin: f64,
}

fn pair_term(
    policy: &MoeModel,
    sess: &mut Session,
    pair: &PreferencePair,
    refs: &RefSource,
    cfg: &OtpoConfig,
    forwards: &AtomicU64,
) -> Result<PairTerm> {
    let fc = response_forward(policy, sess, &pair.prompt, &pair.chosen)?;
    let fr = response_forward(policy, sess, &pair.prompt, &pair.rejected)?;
    forwards.fetch_add(2, Ordering::Relaxed);
    let dc = deltas(
        &fc.logprobs(sess),
        &refs.logprobs(&pair.prompt, &pair.chosen)?,
    )?;
    let dr = deltas(
        &fr.logprobs(sess),
        &refs.logprobs(&pair.prompt, &pair.rejected)?,
    )?;
    let weights = if cfg.use_ot {
        otpo_weights(&fc.hidden, &fr.hidden, policy.cfg.d_model, &cfg.ot)?
    } else {
        TokenWeights::uniform(dc.len(), dr.len())
    };
    let margin = dot(&weights.chosen, &dc) - dot(&weights.rejected, &dr);
    let loss = softplus(-cfg.beta_dpo * margin);

    // tape: β·(⟨w_c, log π_c⟩ − ⟨w_r, log π_r⟩ − ⟨w_c, log π_ref,c⟩ + ⟨w_r, log π_ref,r⟩)
    let sc = fc.weighted_logp(sess, &weights.chosen)?;
    let sr = fr.weighted_logp(sess, &weights.rejected)?;
    let t = &mut sess.tape;
    let diff = t.sub(sc, sr)?;
    let ref_part = margin - (t.value(diff).item() as f64);
    let k = t.constant(Tensor::full(&[1], ref_part as f32));
    let z = t.add(diff, k)?;
    let z = t.scale(z, cfg.beta_dpo as f32)?;
    let log_sigmoid = t.log_sigmoid(z)?;
    Ok(PairTerm {
        log_sigmoid,
        loss,
        margin,
    })
}

/// OTPO loss of one pair under `policy`, evaluated without training.
pub fn otpo_loss(
    policy: &MoeModel,
    pair: &PreferencePair,
    refs: &RefSource,
    cfg: &OtpoConfig,
) -> Result<f64> {
    let mut sess = Session::inference(&policy.params);
    Ok(pair_term(policy, &mut sess, pair, refs, cfg, &AtomicU64::new(0))?.loss)
}

/// Per-pair weights the loss would use.
pub fn pair_weights(
    policy: &MoeModel,
    pair: &PreferencePair,
    cfg: &OtpoConfig,
) -> Result<TokenWeights> {
    let mut sess = Session::inference(&policy.params);
    let fc = response_forward(policy, &mut sess, &pair.prompt, &pair.chosen)?;
    let fr = response_forward(policy, &mut sess, &pair.prompt, &pair.rejected)?;
    otpo_weights(&fc.hidden, &fr.hidden, policy.cfg.d_model, &cfg.ot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtpoStepLog {
    pub step: u64,
    pub loss: f64,
    /// Mean weighted log-ratio margin before `β`.
    pub margin: f64,
    pub policy_forwards: u64,
    pub ref_forwards: u64,
}

pub struct OtpoTrainer {
    pub policy: MoeModel,
    pub opt: AdamW,
    pub cfg: OtpoConfig,
    pub step: u64,
    policy_forwards: AtomicU64,
}

impl OtpoTrainer {
    pub fn new(policy: MoeModel, opt: AdamWConfig, cfg: OtpoConfig) -> Self {
        let opt = AdamW::new(opt, &policy.params);
        Self {
            policy,
            opt,
            cfg,
            step: 0,
            policy_forwards: AtomicU64::new(0),
        }
    }

    /// Policy forwards so far, one per response scored.
    pub fn policy_forwards(&self) -> u64 {
        self.policy_forwards.load(Ordering::Relaxed)
    }

    /// One update on the mean loss over `pairs`. `ref_forwards` in the log is
    /// read from `reference` when given (it is the model behind `refs` in the
    /// uncached baseline).
    pub fn train_step(
        &mut self,
        pairs: &[PreferencePair],
        refs: &RefSource,
        reference: Option<&RefModel>,
    ) -> Result<OtpoStepLog> {
        if pairs.is_empty() {
            return Err(AlignError::InvalidArgument("empty preference batch".into()));
        }
        let mut sess = Session::train(&self.policy.params);
        let mut terms = Vec::with_capacity(pairs.len());
        for p in pairs {
            terms.push(pair_term(
                &self.policy,
                &mut sess,
                p,
                refs,
                &self.cfg,
                &self.policy_forwards,
            )?);
        }
        let t = &mut sess.tape;
        let mut total = terms[0].log_sigmoid;
        for term in &terms[1..] {
            total = t.add(total, term.log_sigmoid)?;
        }
        let loss_var = t.scale(total, -1.0 / pairs.len() as f32)?;
        sess.backward(loss_var)?;
        let grads = sess.param_grads();
        drop(sess);
        self.policy.params.set_grads(grads)?;
        self.opt.step(&mut self.policy.params)?;
        let n = pairs.len() as f64;
        let log = OtpoStepLog {
            step: self.step,
            loss: terms.iter().map(|t| t.loss).sum::<f64>() / n,
            margin: terms.iter().map(|t| t.margin).sum::<f64>() / n,
            policy_forwards: self.policy_forwards(),
            ref_forwards: reference.map_or(0, RefModel::forwards),
        };
        self.step += 1;
        Ok(log)
    }
}
