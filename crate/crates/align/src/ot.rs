//! Entropic optimal transport in the log domain, and the token weights
//! derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// Row-major `[n × m]` coupling.
    pub plan: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `max(|P1 − a|, |Pᵀ1 − b|)`, meaningful as a constraint only for the
    /// balanced solver.
    pub max_violation: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.m];
        for row in self.plan.chunks(self.m) {
            for (s, v) in c.iter_mut().zip(row) {
                *s += v;
            }
        }
        c
    }
}

fn check_simplex(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v <= 0.0) || (s - 1.0).abs() > 1e-9 {
        return Err(AlignError::NonSimplex(format!(
            "{name} (sum {s}, len {})",
            p.len()
        )));
    }
    Ok(())
}

fn check_inputs(cost: &[f64], a: &[f64], b: &[f64], eps: f64) -> Result<()> {
    check_simplex("a", a)?;
    check_simplex("b", b)?;
    if cost.len() != a.len() * b.len() {
        return Err(AlignError::InvalidArgument(format!(
            "cost has {} entries for {}×{}",
            cost.len(),
            a.len(),
            b.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(AlignError::InvalidArgument(
            "cost must be finite and non-negative".into(),
        ));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AlignError::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    Ok(())
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Potentials `f`, `g` parametrize `P_ij = a_i b_j exp((f_i + g_j − C_ij)/ε)`.
/// `lambda = 1` is the balanced update, `lambda < 1` the KL-relaxed one.
fn scale_rows(cost: &[f64], b: &[f64], g: &[f64], eps: f64, lambda: f64, f: &mut [f64]) {
    let m = b.len();
    for (i, fi) in f.iter_mut().enumerate() {
        let l = logsumexp((0..m).map(|j| b[j].ln() + (g[j] - cost[i * m + j]) / eps));
        *fi = -lambda * eps * l;
    }
}

fn scale_cols(cost: &[f64], a: &[f64], f: &[f64], eps: f64, lambda: f64, g: &mut [f64]) {
    let (n, m) = (a.len(), g.len());
    for (j, gj) in g.iter_mut().enumerate() {
        let l = logsumexp((0..n).map(|i| a[i].ln() + (f[i] - cost[i * m + j]) / eps));
        *gj = -lambda * eps * l;
    }
}

fn assemble(cost: &[f64], a: &[f64], b: &[f64], f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let m = b.len();
    let mut p = Vec::with_capacity(cost.len());
    for i in 0..a.len() {
        for j in 0..m {
            p.push(a[i] * b[j] * ((f[i] + g[j] - cost[i * m + j]) / eps).exp());
        }
    }
    p
}

fn violation(p: &TransportPlan) -> f64 {
    let r = p
        .row_sums()
        .iter()
        .zip(&p.a)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let c = p
        .col_sums()
        .iter()
        .zip(&p.b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

/// Balanced entropic OT. Stops once the marginal violation is at most `tol`
/// (checked after each full row+column sweep) or after `max_iter` sweeps.
pub fn sinkhorn(
    cost: &[f64],
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    check_inputs(cost, a, b, epsilon)?;
    let (n, m) = (a.len(), b.len());
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    let mut out = TransportPlan {
        plan: vec![],
        n,
        m,
        a: a.to_vec(),
        b: b.to_vec(),
        epsilon,
        iterations: 0,
        converged: false,
        max_violation: f64::INFINITY,
    };
    for it in 1..=max_iter.max(1) {
        scale_rows(cost, b, &g, epsilon, 1.0, &mut f);
        scale_cols(cost, a, &f, epsilon, 1.0, &mut g);
        out.plan = assemble(cost, a, b, &f, &g, epsilon);
        out.iterations = it;
        out.max_violation = violation(&out);
        if out.max_violation <= tol {
            out.converged = true;
            break;
        }
    }
    Ok(out)
}

/// Entropic OT with both marginal constraints replaced by `rho·KL` penalties:
/// minimizes `⟨C,P⟩ + ε·KL(P‖a⊗b) + ρ·KL(P1‖a) + ρ·KL(Pᵀ1‖b)`.
/// Converges when no potential moves by more than `tol` in a sweep.
pub fn sinkhorn_unbalanced(
    cost: &[f64],
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    rho: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    check_inputs(cost, a, b, epsilon)?;
    if !(rho > 0.0) {
        return Err(AlignError::InvalidArgument(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let (n, m) = (a.len(), b.len());
    let lambda = rho / (rho + epsilon);
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    let (mut iterations, mut converged) = (0, false);
    for it in 1..=max_iter.max(1) {
        let (f0, g0) = (f.clone(), g.clone());
        scale_rows(cost, b, &g, epsilon, lambda, &mut f);
        scale_cols(cost, a, &f, epsilon, lambda, &mut g);
        iterations = it;
        let delta = f
            .iter()
            .zip(&f0)
            .chain(g.iter().zip(&g0))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if delta <= tol {
            converged = true;
            break;
        }
    }
    let mut out = TransportPlan {
        plan: assemble(cost, a, b, &f, &g, epsilon),
        n,
        m,
        a: a.to_vec(),
        b: b.to_vec(),
        epsilon,
        iterations,
        converged,
        max_violation: 0.0,
    };
    out.max_violation = violation(&out);
    Ok(out)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
        .sum()
}

/// Objective minimized by [`sinkhorn_unbalanced`].
pub fn unbalanced_objective(
    cost: &[f64],
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    rho: f64,
    plan: &[f64],
) -> f64 {
    let m = b.len();
    let ab: Vec<f64> = a
        .iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect();
    let rows: Vec<f64> = plan.chunks(m).map(|r| r.iter().sum()).collect();
    let mut cols = vec![0.0; m];
    for r in plan.chunks(m) {
        for (c, v) in cols.iter_mut().zip(r) {
            *c += v;
        }
    }
    let transport: f64 = cost.iter().zip(plan).map(|(c, p)| c * p).sum();
    transport + epsilon * kl(plan, &ab) + rho * (kl(&rows, a) + kl(&cols, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtConfig {
    pub epsilon: f64,
    /// Marginal relaxation strength.
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            rho: 1.0,
            max_iter: 2000,
            tol: 1e-10,
        }
    }
}

/// Per-token weights for one preference pair; each side sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

impl TokenWeights {
    pub fn uniform(nc: usize, nr: usize) -> Self {
        Self {
            chosen: vec![1.0 / nc as f64; nc],
            rejected: vec![1.0 / nr as f64; nr],
        }
    }
}

/// Squared Euclidean distances between rows, divided by the largest one so
/// that ε is independent of the hidden-state scale.
pub fn cost_matrix(hc: &[f32], hr: &[f32], d: usize) -> Vec<f64> {
    let mut c: Vec<f64> = hc
        .chunks(d)
        .flat_map(|u| {
            hr.chunks(d).map(move |v| {
                u.iter()
                    .zip(v)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum()
            })
        })
        .collect();
    let max = c.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        c.iter_mut().for_each(|x| *x /= max);
    }
    c
}

/// Token weights from the relaxed transport plan between the two responses'
/// hidden states (`[n_c × d]`, `[n_r × d]`): normalized row and column masses.
pub fn otpo_weights(hc: &[f32], hr: &[f32], d: usize, cfg: &OtConfig) -> Result<TokenWeights> {
    if d == 0 || hc.is_empty() || hr.is_empty() {
        return Err(AlignError::EmptyResponse);
    }
    if !hc.len().is_multiple_of(d) || !hr.len().is_multiple_of(d) {
        return Err(AlignError::InvalidArgument(
            "hidden states are not a multiple of d".into(),
        ));
    }
    let (nc, nr) = (hc.len() / d, hr.len() / d);
    let cost = cost_matrix(hc, hr, d);
    let a = vec![1.0 / nc as f64; nc];
    let b = vec![1.0 / nr as f64; nr];
    let plan = sinkhorn_unbalanced(&cost, &a, &b, cfg.epsilon, cfg.rho, cfg.max_iter, cfg.tol)?;
    let normalize = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    Ok(TokenWeights {
        chosen: normalize(plan.row_sums()),
        rejected: normalize(plan.col_sums()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_is_outer_product_after_one_sweep() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.4];
        let p = sinkhorn(&[0.0; 6], &a, &b, 0.1, 100, 1e-12).unwrap();
        assert!(p.converged);
        assert_eq!(p.iterations, 1);
        for i in 0..3 {
            for j in 0..2 {
                assert!((p.plan[i * 2 + j] - a[i] * b[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn anti_diagonal_cost_concentrates_on_diagonal() {
        let p = sinkhorn(
            &[0.0, 1.0, 1.0, 0.0],
            &[0.5, 0.5],
            &[0.5, 0.5],
            0.01,
            1000,
            1e-12,
        )
        .unwrap();
        assert!(p.converged);
        assert!(p.plan[1] + p.plan[2] <= 1e-3);
    }

    #[test]
    fn non_simplex_marginal_is_rejected() {
        let e = sinkhorn(&[0.0; 4], &[0.5, 0.6], &[0.5, 0.5], 0.1, 10, 1e-9);
        assert!(matches!(e, Err(AlignError::NonSimplex(_))));
    }

    #[test]
    fn identical_states_give_uniform_weights() {
        let h = [0.5f32, -1.0, 0.5, -1.0, 0.5, -1.0];
        let w = otpo_weights(&h[..4], &h, 2, &OtConfig::default()).unwrap();
        assert!(w.chosen.iter().all(|x| (x - 0.5).abs() < 1e-12));
        assert!(w.rejected.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }
}
