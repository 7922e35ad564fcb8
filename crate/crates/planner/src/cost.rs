//! Per-layer cost inputs and the expert-parallel communication model.

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

/// Abstract per-layer costs of one microbatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCostModel {
    /// Forward time per layer.
    pub f: Vec<f64>,
    /// Backward time per layer.
    pub b: Vec<f64>,
    /// Added to the forward of the first stage.
    #[serde(default)]
    pub embed_extra: f64,
    /// Added to the forward of the last stage.
    #[serde(default)]
    pub loss_extra: f64,
    /// Fraction of the forward re-executed during backward on recomputing stages.
    #[serde(default)]
    pub recompute_factor: f64,
    /// Activation memory per layer per in-flight microbatch.
    #[serde(default)]
    pub m_act: Vec<f64>,
    /// Weight memory per layer.
    #[serde(default)]
    pub m_w: Vec<f64>,
    /// Share of activation memory a recomputing stage keeps.
    #[serde(default = "default_retention")]
    pub retention: f64,
    /// Per-layer MoE combine (unpermute) cost added to the forward.
    #[serde(default)]
    pub combine_cost: f64,
    /// Share of the combine cost hidden behind computation.
    #[serde(default)]
    pub overlap_fraction: f64,
}

fn default_retention() -> f64 {
    0.25
}

impl StageCostModel {
    /// Equal forward/backward costs and unit memory for `layers` layers.
    pub fn uniform(layers: usize, f: f64, b: f64) -> Self {
        Self {
            f: vec![f; layers],
            b: vec![b; layers],
            embed_extra: 0.0,
            loss_extra: 0.0,
            recompute_factor: 0.0,
            m_act: vec![1.0; layers],
            m_w: vec![1.0; layers],
            retention: default_retention(),
            combine_cost: 0.0,
            overlap_fraction: 0.0,
        }
    }

    pub fn layers(&self) -> usize {
        self.f.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f.len();
        let bad = |m: String| Err(PlanError::InvalidCost(m));
        if n == 0 {
            return bad("no layers".into());
        }
        if self.b.len() != n {
            return bad(format!("{} backward costs for {n} layers", self.b.len()));
        }
        for (name, v) in [("m_act", &self.m_act), ("m_w", &self.m_w)] {
            if !v.is_empty() && v.len() != n {
                return bad(format!("{} {name} entries for {n} layers", v.len()));
            }
        }
        let scalars = [
            self.embed_extra,
            self.loss_extra,
            self.recompute_factor,
            self.combine_cost,
        ];
        let all = self
            .f
            .iter()
            .chain(&self.b)
            .chain(&self.m_act)
            .chain(&self.m_w)
            .chain(&scalars);
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("costs must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.retention) || !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("retention and overlap_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Forward time of layer `l`, including the exposed combine cost.
    pub fn fwd(&self, l: usize) -> f64 {
        self.f[l] + self.combine_cost * (1.0 - self.overlap_fraction)
    }

    pub fn act(&self, l: usize) -> f64 {
        self.m_act.get(l).copied().unwrap_or(0.0)
    }

    pub fn weight(&self, l: usize) -> f64 {
        self.m_w.get(l).copied().unwrap_or(0.0)
    }
}

/// Interconnect model for expert-parallel all-to-all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommModel {
    pub gpus_per_node: usize,
    /// Bytes per time unit within a node.
    pub intra_bw: f64,
    /// Bytes per time unit across nodes.
    pub inter_bw: f64,
    pub ep_degree: usize,
}

impl Default for CommModel {
    fn default() -> Self {
        Self {
            gpus_per_node: 8,
            intra_bw: 4e11,
            inter_bw: 5e10,
            ep_degree: 8,
        }
    }
}

impl CommModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.inter_bw > 0.0 && self.intra_bw >= self.inter_bw && self.intra_bw.is_finite()) {
            return Err(PlanError::InvalidCost(
                "need intra_bw >= inter_bw > 0".into(),
            ));
        }
        if self.gpus_per_node == 0 || self.ep_degree == 0 {
            return Err(PlanError::InvalidCost(
                "gpus_per_node and ep_degree must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Time for an all-to-all of `bytes`: NVLink-class bandwidth while the
/// expert-parallel group fits in one node, the inter-node link otherwise.
pub fn a2a_time(bytes: f64, comm: &CommModel) -> Result<f64> {
    comm.validate()?;
    if !(bytes >= 0.0 && bytes.is_finite()) {
        return Err(PlanError::InvalidCost(format!("bytes = {bytes}")));
    }
    let bw = if comm.ep_degree <= comm.gpus_per_node {
        comm.intra_bw
    } else {
        comm.inter_bw
    };
    Ok(bytes / bw)
}
