use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

/// Model and loss-schedule hyperparameters.
///
/// The reference point at full scale is 16 experts with 4 active per token;
/// defaults here are desk sized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoEConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Hidden width of each expert.
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Number of extra future-token heads.
    pub mtp_depth: usize,
    /// Leading layers that use a single dense FFN instead of experts.
    pub dense_layers: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub decay_steps: u64,
    pub alpha_floor: f64,
    pub beta_floor: f64,
    pub mtp_weight: f64,
    pub init_std: f32,
    pub rms_eps: f32,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            vocab_size: compass_core::tokenizer::VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_experts: 4,
            top_k: 2,
            d_ff: 32,
            max_seq_len: 64,
            mtp_depth: 1,
            dense_layers: 0,
            alpha0: 0.01,
            beta0: 0.001,
            decay_steps: 1000,
            alpha_floor: 0.001,
            beta_floor: 0.0001,
            mtp_weight: 1.0,
            init_std: 0.02,
            rms_eps: 1e-5,
        }
    }
}

/// Loss coefficients at one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
}

/// `max(floor, init · (1 − step/decay_steps))`.
pub fn decayed(init: f64, floor: f64, step: u64, decay_steps: u64) -> f64 {
    if decay_steps == 0 {
        return floor;
    }
    let frac = 1.0 - step as f64 / decay_steps as f64;
    (init * frac).max(floor)
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoeError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, d_model, d_ff and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "need 1 ≤ top_k ≤ n_experts, got {} of {}",
                self.top_k, self.n_experts
            ));
        }
        if self.dense_layers > self.n_layers {
            return bad("dense_layers exceeds n_layers".into());
        }
        let coeffs = [
            self.alpha0,
            self.beta0,
            self.alpha_floor,
            self.beta_floor,
            self.mtp_weight,
        ];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return bad("loss coefficients must be finite and ≥ 0".into());
        }
        if self.rms_eps <= 0.0 || self.init_std <= 0.0 {
            return bad("rms_eps and init_std must be > 0".into());
        }
        Ok(())
    }

    pub fn coefficients(&self, step: u64) -> Coefficients {
        Coefficients {
            alpha: decayed(self.alpha0, self.alpha_floor, step, self.decay_steps),
            beta: decayed(self.beta0, self.beta_floor, step, self.decay_steps),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        layer >= self.dense_layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_schedule() {
        let cfg = MoEConfig {
            alpha0: 0.01,
            alpha_floor: 0.0,
            beta0: 0.001,
            beta_floor: 0.0002,
            decay_steps: 100,
            ..Default::default()
        };
        assert_eq!(
            cfg.coefficients(0),
            Coefficients {
                alpha: 0.01,
                beta: 0.001
            }
        );
        assert!((cfg.coefficients(50).alpha - 0.005).abs() < 1e-15);
        assert_eq!(
            cfg.coefficients(100),
            Coefficients {
                alpha: 0.0,
                beta: 0.0002
            }
        );
        assert_eq!(
            cfg.coefficients(1000),
            Coefficients {
                alpha: 0.0,
                beta: 0.0002
            }
        );
    }

    #[test]
    fn validation() {
        assert!(MoEConfig::default().validate().is_ok());
        let bad = MoEConfig {
            top_k: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
