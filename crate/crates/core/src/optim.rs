use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`.
///
/// The update is evaluated in f64 and rounded once into the f32 parameter.
pub fn adamw_step(param: &mut [f32], grad: &[f32], state: &mut AdamState, cfg: &AdamWConfig) {
    debug_assert_eq!(param.len(), grad.len());
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, eps, wd) = (cfg.lr, cfg.eps, cfg.weight_decay);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let theta = param[i] as f64;
        param[i] = (theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta)) as f32;
    }
}

/// AdamW over a whole [`ParamStore`]. Parameters whose gradient is `None`
/// are skipped entirely (no decay, no moment update).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            states: params
                .iter()
                .map(|(_, _, t)| AdamState::zeros(t.numel()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.states.len() != params.len() {
            return Err(CoreError::InvalidArgument(
                "optimizer built for a different parameter set".into(),
            ));
        }
        for (i, state) in self.states.iter_mut().enumerate() {
            let t = params.get_mut(crate::params::ParamId(i));
            let Some(grad) = t.grad.take() else { continue };
            adamw_step(t.data_mut(), &grad, state, &self.cfg);
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_identity() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut s = AdamState::zeros(3);
        adamw_step(&mut p, &[0.3, 0.1, -4.0], &mut s, &cfg);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grad_pure_shrink() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![2.0f32];
        let mut s = AdamState::zeros(1);
        adamw_step(&mut p, &[0.0], &mut s, &cfg);
        assert_eq!(p[0], (2.0f64 * (1.0 - 0.1 * 0.5)) as f32);
    }

    #[test]
    fn one_step_matches_hand_execution() {
        // θ=1, g=1, defaults: m=0.1, v=0.001, m̂=1, v̂=1
        let cfg = AdamWConfig::default();
        let hand = 1.0f64 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01 * 1.0);
        let mut p = vec![1.0f32];
        let mut s = AdamState::zeros(1);
        adamw_step(&mut p, &[1.0], &mut s, &cfg);
        // the hand value rounded to the f32 parameter storage
        assert!((p[0] as f64 - hand as f32 as f64).abs() <= 1e-8);
        assert!((p[0] as f64 - hand).abs() < 1e-7);
        assert!((s.m[0] - 0.1).abs() < 1e-8);
    }
}
