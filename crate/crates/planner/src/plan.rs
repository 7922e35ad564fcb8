//! Pipeline plans and the min-max uneven partitioner.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cost::StageCostModel;
use crate::error::{PlanError, Result};

/// Layer placement and schedule shape of a pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    /// Physical stages.
    pub p: usize,
    /// Model chunks per stage.
    pub v: usize,
    /// Microbatches per step.
    pub m: usize,
    /// `p·v` contiguous half-open layer ranges; virtual stage `k` runs on
    /// physical stage `k mod p`.
    pub ranges: Vec<(usize, usize)>,
    /// Physical stages that recompute activations in backward.
    #[serde(default)]
    pub recompute_stages: BTreeSet<usize>,
}

impl PipelinePlan {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(PlanError::InvalidPlan(m));
        if self.p == 0 || self.v == 0 || self.m == 0 {
            return bad("p, v and m must be at least 1".into());
        }
        if self.ranges.len() != self.p * self.v {
            return bad(format!(
                "{} ranges for {} virtual stages",
                self.ranges.len(),
                self.p * self.v
            ));
        }
        let mut next = 0;
        for &(lo, hi) in &self.ranges {
            if lo != next || hi <= lo {
                return bad(format!("range {lo}..{hi} breaks the partition"));
            }
            next = hi;
        }
        if next != layers {
            return bad(format!("ranges cover {next} of {layers} layers"));
        }
        if let Some(&s) = self.recompute_stages.iter().find(|&&s| s >= self.p) {
            return bad(format!("recompute stage {s} of {}", self.p));
        }
        if self.v > 1 && !self.m.is_multiple_of(self.p) {
            return bad(format!(
                "interleaving needs m divisible by p, got m={} p={}",
                self.m, self.p
            ));
        }
        Ok(())
    }

    pub fn virtual_stages(&self) -> usize {
        self.p * self.v
    }

    pub fn stage_of(&self, vstage: usize) -> usize {
        vstage % self.p
    }

    /// Cut points: layer counts before each range boundary.
    pub fn cuts(&self) -> Vec<usize> {
        self.ranges[..self.ranges.len() - 1]
            .iter()
            .map(|r| r.1)
            .collect()
    }

    /// `(forward, backward)` time of virtual stage `k` for one microbatch.
    pub fn chunk_times(&self, costs: &StageCostModel, k: usize) -> (f64, f64) {
        let (lo, hi) = self.ranges[k];
        let f: f64 = (lo..hi).map(|l| costs.fwd(l)).sum();
        let b: f64 = (lo..hi).map(|l| costs.b[l]).sum();
        let mut fwd = f;
        if k == 0 {
            fwd += costs.embed_extra;
        }
        if k + 1 == self.virtual_stages() {
            fwd += costs.loss_extra;
        }
        let mut bwd = b;
        if self.recompute_stages.contains(&self.stage_of(k)) {
            bwd += costs.recompute_factor * f;
        }
        (fwd, bwd)
    }

    /// Per-microbatch compute time of each physical stage.
    pub fn stage_times(&self, costs: &StageCostModel) -> Vec<f64> {
        let mut t = vec![0.0; self.p];
        for k in 0..self.virtual_stages() {
            let (f, b) = self.chunk_times(costs, k);
            t[self.stage_of(k)] += f + b;
        }
        t
    }

    pub fn max_stage_time(&self, costs: &StageCostModel) -> f64 {
        self.stage_times(costs).into_iter().fold(0.0, f64::max)
    }
}

/// Time of stage `s` of `p` holding layers `lo..hi` (one chunk per stage).
pub fn segment_time(
    costs: &StageCostModel,
    s: usize,
    p: usize,
    lo: usize,
    hi: usize,
    recompute: bool,
) -> f64 {
    let f: f64 = (lo..hi).map(|l| costs.fwd(l)).sum();
    let b: f64 = (lo..hi).map(|l| costs.b[l]).sum();
    let mut t = f + b;
    if s == 0 {
        t += costs.embed_extra;
    }
    if s + 1 == p {
        t += costs.loss_extra;
    }
    if recompute {
        t += costs.recompute_factor * f;
    }
    t
}

/// Equal-size chunks; when the layers do not divide evenly the later
/// chunks get one layer more.
pub fn uniform_plan(
    layers: usize,
    p: usize,
    v: usize,
    m: usize,
    recompute_stages: BTreeSet<usize>,
) -> Result<PipelinePlan> {
    let k = p * v;
    if k == 0 || k > layers {
        return Err(PlanError::TooManyStages { p: k, layers });
    }
    let (q, r) = (layers / k, layers % k);
    let mut ranges = Vec::with_capacity(k);
    let mut lo = 0;
    for i in 0..k {
        let size = q + usize::from(i >= k - r);
        ranges.push((lo, lo + size));
        lo += size;
    }
    let plan = PipelinePlan {
        p,
        v,
        m,
        ranges,
        recompute_stages,
    };
    plan.validate(layers)?;
    Ok(plan)
}

/// Contiguous `p`-stage partition minimizing the largest stage time.
///
/// Dynamic programming over suffixes gives the optimum; cuts are then
/// chosen greedily as early as the optimum allows, which yields the
/// lexicographically smallest optimal cut vector.
pub fn partition_uneven(
    costs: &StageCostModel,
    p: usize,
    m: usize,
    recompute_stages: BTreeSet<usize>,
) -> Result<PipelinePlan> {
    costs.validate()?;
    let n = costs.layers();
    if p == 0 || p > n {
        return Err(PlanError::TooManyStages { p, layers: n });
    }
    let t = |s: usize, lo: usize, hi: usize| {
        segment_time(costs, s, p, lo, hi, recompute_stages.contains(&s))
    };
    // g[s][i]: best max time for layers i.. on stages s..
    let mut g = vec![vec![f64::INFINITY; n + 1]; p];
    for i in 0..n {
        g[p - 1][i] = t(p - 1, i, n);
    }
    for s in (0..p - 1).rev() {
        let stages_after = p - s - 1;
        for i in 0..n.saturating_sub(stages_after) {
            let mut best = f64::INFINITY;
            for j in i + 1..=n - stages_after {
                best = best.min(t(s, i, j).max(g[s + 1][j]));
            }
            g[s][i] = best;
        }
    }
    let opt = g[0][0];
    let mut ranges = Vec::with_capacity(p);
    let mut i = 0;
    for s in 0..p - 1 {
        let j = (i + 1..=n - (p - s - 1))
            .find(|&j| t(s, i, j) <= opt && g[s + 1][j] <= opt)
            .expect("the optimum is attainable");
        ranges.push((i, j));
        i = j;
    }
    ranges.push((i, n));
    Ok(PipelinePlan {
        p,
        v: 1,
        m,
        ranges,
        recompute_stages,
    })
}
