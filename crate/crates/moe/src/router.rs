//! Top-k routing and the router regularizers.

use compass_core::{top_k, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Routing record for one batch of `b` tokens over `n` experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    /// Router logits `z`, `[b × n]`.
    pub logits: Vec<f32>,
    /// Softmax of the logits, `[b × n]`.
    pub probs: Vec<f32>,
    /// Selected experts per token, `[b × k]`, descending probability.
    pub topk_idx: Vec<usize>,
    /// Selected probabilities renormalized to sum 1 per token, `[b × k]`.
    pub combine_weights: Vec<f32>,
    /// Tokens assigned to each expert; sums to `b·k`.
    pub counts: Vec<usize>,
    /// Column sums of `probs`; sums to `b`.
    pub agg_prob: Vec<f64>,
    pub b: usize,
    pub n: usize,
    pub k: usize,
}

impl RouterDecision {
    /// Experts chosen for token `j`.
    pub fn experts_of(&self, j: usize) -> &[usize] {
        &self.topk_idx[j * self.k..(j + 1) * self.k]
    }

    /// `(token, slot)` pairs routed to expert `e`, in token order.
    pub fn assignments(&self, e: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.counts[e]);
        for j in 0..self.b {
            for s in 0..self.k {
                if self.topk_idx[j * self.k + s] == e {
                    out.push((j, s));
                }
            }
        }
        out
    }

    /// Expert-usage distribution `c / (b·k)`.
    pub fn usage(&self) -> Vec<f64> {
        let total = (self.b * self.k) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Tape handles tied to a [`RouterDecision`].
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub logits: Var,
    pub probs: Var,
    /// `[b × k]` combine weights.
    pub combine: Var,
}

/// Route from precomputed router logits `[b × n]`.
pub fn route_logits(
    tape: &mut Tape,
    logits: Var,
    k: usize,
) -> Result<(RouterDecision, RouterVars)> {
    let probs = tape.softmax_rows(logits)?;
    let (b, n) = (tape.value(probs).rows(), tape.value(probs).cols());
    let pv = tape.data(probs).to_vec();
    let mut topk_idx = Vec::with_capacity(b * k);
    let mut counts = vec![0usize; n];
    let mut agg_prob = vec![0.0f64; n];
    for j in 0..b {
        let row = &pv[j * n..(j + 1) * n];
        let (idx, _) = top_k(row, k)?;
        for &e in &idx {
            counts[e] += 1;
        }
        topk_idx.extend(idx);
        for (a, &p) in agg_prob.iter_mut().zip(row) {
            *a += p as f64;
        }
    }
    let picked = tape.gather_cols(probs, &topk_idx)?;
    let ones = tape.constant(Tensor::full(&[k, 1], 1.0));
    let denom = tape.matmul(picked, ones)?;
    let combine = tape.div_col(picked, denom)?;
    let decision = RouterDecision {
        logits: tape.data(logits).to_vec(),
        probs: pv,
        topk_idx,
        combine_weights: tape.data(combine).to_vec(),
        counts,
        agg_prob,
        b,
        n,
        k,
    };
    Ok((
        decision,
        RouterVars {
            logits,
            probs,
            combine,
        },
    ))
}

/// Route `hidden[b × d]` through router weights `[d × n]`.
pub fn route_tokens(
    tape: &mut Tape,
    hidden: Var,
    router: Var,
    k: usize,
) -> Result<(RouterDecision, RouterVars)> {
    let logits = tape.matmul(hidden, router)?;
    route_logits(tape, logits, k)
}

/// `L_aux = N·Σᵢ (pᵢ/B)·(cᵢ/(B·K))`, differentiable through `p` only.
pub fn aux_loss(tape: &mut Tape, d: &RouterDecision, v: &RouterVars) -> Result<Var> {
    let b = d.b as f64;
    let scale = d.n as f64 / (b * b * d.k as f64);
    let w: Vec<f32> = d
        .counts
        .iter()
        .map(|&c| (scale * c as f64) as f32)
        .collect();
    let p = tape.sum_rows(v.probs)?;
    Ok(tape.weighted_sum(p, &w)?)
}

/// `L_Z = (1/B) Σⱼ (log Σᵢ exp zᵢʲ)²`.
pub fn z_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lse = tape.logsumexp_rows(logits)?;
    let sq = tape.mul(lse, lse)?;
    Ok(tape.mean_all(sq)?)
}

/// L_aux evaluated directly from aggregate statistics, in f64.
pub fn aux_loss_value(agg_prob: &[f64], counts: &[usize], b: usize, k: usize) -> f64 {
    let n = agg_prob.len() as f64;
    let b = b as f64;
    n * agg_prob
        .iter()
        .zip(counts)
        .map(|(&p, &c)| (p / b) * (c as f64 / (b * k as f64)))
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(tape: &mut Tape, rows: &[&[f32]]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn two_experts_top2_is_full_softmax() {
        let mut t = Tape::new();
        let z = logits(&mut t, &[&[0.3, -1.2], &[2.0, 0.5]]);
        let (d, _) = route_logits(&mut t, z, 2).unwrap();
        let p: Vec<f32> = d
            .topk_idx
            .iter()
            .enumerate()
            .map(|(i, &e)| d.probs[(i / 2) * 2 + e])
            .collect();
        for (a, b) in d.combine_weights.iter().zip(&p) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_pick_expert_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[5, 4]));
        let (d, _) = route_logits(&mut t, z, 1).unwrap();
        assert!(d.topk_idx.iter().all(|&e| e == 0));
        assert_eq!(d.counts, vec![5, 0, 0, 0]);
    }

    #[test]
    fn hand_aggregation_and_aux() {
        let mut t = Tape::new();
        let z = logits(
            &mut t,
            &[&[0.9f32.ln(), 0.1f32.ln()], &[0.8f32.ln(), 0.2f32.ln()]],
        );
        let (d, v) = route_logits(&mut t, z, 1).unwrap();
        assert_eq!(d.counts, vec![2, 0]);
        assert!((d.agg_prob[0] - 1.7).abs() < 1e-6);
        assert!((d.agg_prob[1] - 0.3).abs() < 1e-6);
        let l = aux_loss(&mut t, &d, &v).unwrap();
        assert!((t.value(l).item() - 1.7).abs() < 1e-6);
    }

    #[test]
    fn z_loss_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 4]));
        let l = z_loss(&mut t, z).unwrap();
        assert!((t.value(l).item() as f64 - 4f64.ln().powi(2)).abs() < 1e-6);
        let z = logits(&mut t, &[&[1.0, 0.0]]);
        let l = z_loss(&mut t, z).unwrap();
        let want = (1f64.exp() + 1.0).ln().powi(2);
        assert!((t.value(l).item() as f64 - want).abs() < 1e-6);
        assert!((want - 1.724656).abs() < 1e-6);
    }
}
