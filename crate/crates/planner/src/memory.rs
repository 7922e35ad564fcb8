//! Peak memory per stage under the simulated schedule.

use serde::{Deserialize, Serialize};

use crate::cost::StageCostModel;
use crate::error::Result;
use crate::plan::PipelinePlan;
use crate::sim::{stage_order, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMemory {
    pub stage: usize,
    pub weights: f64,
    /// Most microbatch-chunks whose activations are held at once.
    pub in_flight: usize,
    pub peak_activations: f64,
    pub peak: f64,
}

/// Walk each stage's op order: a forward stores the chunk's activations
/// (scaled by the retention share on recomputing stages), the matching
/// backward frees them. Without interleaving, stage `s` peaks at
/// `min(m, p − s)` microbatches.
pub fn memory_model(plan: &PipelinePlan, costs: &StageCostModel) -> Result<Vec<StageMemory>> {
    costs.validate()?;
    plan.validate(costs.layers())?;
    let p = plan.p;
    let chunk_act = |k: usize| -> f64 {
        let (lo, hi) = plan.ranges[k];
        let a: f64 = (lo..hi).map(|l| costs.act(l)).sum();
        if plan.recompute_stages.contains(&plan.stage_of(k)) {
            a * costs.retention
        } else {
            a
        }
    };
    let mut out = Vec::with_capacity(p);
    for s in 0..p {
        let weights: f64 = (0..plan.v)
            .map(|c| {
                let (lo, hi) = plan.ranges[c * p + s];
                (lo..hi).map(|l| costs.weight(l)).sum::<f64>()
            })
            .sum();
        let (mut live, mut n, mut peak_act, mut peak_n) = (0.0f64, 0usize, 0.0f64, 0usize);
        for op in stage_order(p, plan.v, plan.m, s) {
            let a = chunk_act(op.chunk * p + s);
            match op.phase {
                Phase::Forward => {
                    live += a;
                    n += 1;
                }
                Phase::Backward => {
                    live -= a;
                    n -= 1;
                }
            }
            peak_act = peak_act.max(live);
            peak_n = peak_n.max(n);
        }
        out.push(StageMemory {
            stage: s,
            weights,
            in_flight: peak_n,
            peak_activations: peak_act,
            peak: weights + peak_act,
        });
    }
    Ok(out)
}
