//! Per-token log-probabilities and sampling from a [`MoeModel`].

use compass_core::tokenizer::{self, BOS};
use compass_core::{Prng, Session, Var};
use compass_moe::{MoeModel, NoHook, TokenBatch};

use crate::error::{AlignError, Result};

/// `BOS · prompt · response`.
pub fn sequence(prompt: &[u32], response: &[u32]) -> Vec<u32> {
    let mut s = Vec::with_capacity(1 + prompt.len() + response.len());
    s.push(BOS);
    s.extend_from_slice(prompt);
    s.extend_from_slice(response);
    s
}

/// Graph handles for one response scored in context.
pub struct ResponseForward {
    /// `[T × 1]` log-probability of the next token at every position.
    pub next_logp: Var,
    /// Rows of `next_logp` that score the response tokens, in order.
    pub rows: Vec<usize>,
    /// Final hidden state at each response token, `[n × d]`, detached.
    pub hidden: Vec<f32>,
    /// Final normed hidden states of the whole sequence, `[T × d]`.
    pub hidden_var: Var,
}

impl ResponseForward {
    /// Response log-probs as recorded on the tape.
    pub fn logprobs(&self, sess: &Session) -> Vec<f32> {
        let v = sess.tape.data(self.next_logp);
        self.rows.iter().map(|&r| v[r]).collect()
    }

    /// `Σ_t w_t·log π(y_t)` as a differentiable scalar.
    pub fn weighted_logp(&self, sess: &mut Session, w: &[f64]) -> Result<Var> {
        let mut full = vec![0.0f32; sess.tape.value(self.next_logp).numel()];
        for (&r, &x) in self.rows.iter().zip(w) {
            full[r] = x as f32;
        }
        Ok(sess.tape.weighted_sum(self.next_logp, &full)?)
    }
}

/// One forward pass of `BOS · prompt · response` as its own sequence.
pub fn response_forward(
    model: &MoeModel,
    sess: &mut Session,
    prompt: &[u32],
    response: &[u32],
) -> Result<ResponseForward> {
    if response.is_empty() {
        return Err(AlignError::EmptyResponse);
    }
    let seq = sequence(prompt, response);
    let batch = TokenBatch::from_sequences(std::slice::from_ref(&seq))?;
    let fwd = model.forward_backbone(sess, &batch, &mut NoHook)?;
    let t = &mut sess.tape;
    let logp = t.log_softmax_rows(fwd.logits)?;
    let next: Vec<usize> = (0..seq.len())
        .map(|q| seq.get(q + 1).copied().unwrap_or(0) as usize)
        .collect();
    let next_logp = t.gather_cols(logp, &next)?;
    let start = 1 + prompt.len();
    let d = model.cfg.d_model;
    let hidden = t.data(fwd.normed)[start * d..].to_vec();
    Ok(ResponseForward {
        next_logp,
        rows: (start - 1..seq.len() - 1).collect(),
        hidden,
        hidden_var: fwd.normed,
    })
}

/// Inference-only per-token log-probabilities of `response` after `prompt`.
pub fn response_logprobs(model: &MoeModel, prompt: &[u32], response: &[u32]) -> Result<Vec<f32>> {
    let mut sess = Session::inference(&model.params);
    let f = response_forward(model, &mut sess, prompt, response)?;
    Ok(f.logprobs(&sess))
}

/// Ancestral sampling until a special token, `max_new` tokens, or the
/// context limit. The stop token is not included.
pub fn sample_response(
    model: &MoeModel,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    rng: &mut Prng,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(AlignError::EmptyPrompt);
    }
    let mut seq = sequence(prompt, &[]);
    let v = model.cfg.vocab_size;
    let start = seq.len();
    while seq.len() - start < max_new && seq.len() < model.cfg.max_seq_len {
        let batch = TokenBatch::from_sequences(std::slice::from_ref(&seq))?;
        let mut sess = Session::inference(&model.params);
        let fwd = model.forward_backbone(&mut sess, &batch, &mut NoHook)?;
        let last = &sess.tape.data(fwd.logits)[(seq.len() - 1) * v..seq.len() * v];
        let z: Vec<f64> = last
            .iter()
            .map(|&x| x as f64 / temperature.max(1e-6))
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let mut u = rng.uniform() * p.iter().sum::<f64>();
        let mut tok = v - 1;
        for (i, pi) in p.iter().enumerate() {
            if u < *pi {
                tok = i;
                break;
            }
            u -= pi;
        }
        if tokenizer::is_special(tok as u32) {
            break;
        }
        seq.push(tok as u32);
    }
    Ok(seq[start..].to_vec())
}
