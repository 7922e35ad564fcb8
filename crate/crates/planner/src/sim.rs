//! Discrete-event simulation of the 1F1B schedule and its interleaved
//! (virtual-pipeline) variant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::StageCostModel;
use crate::error::{PlanError, Result};
use crate::plan::PipelinePlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    Backward,
}

/// One unit of work on a stage: a microbatch through one local chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Op {
    pub phase: Phase,
    pub microbatch: usize,
    /// Chunk index local to the stage, `0..v`.
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stage: usize,
    pub phase: Phase,
    pub microbatch: usize,
    pub chunk: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub trace: Vec<TraceEvent>,
    pub total_time: f64,
    /// Compute time per stage.
    pub busy: Vec<f64>,
    /// Busiest stage (lowest index on ties).
    pub critical_stage: usize,
    /// Idle share of the critical stage over the whole step.
    pub bubble_fraction: f64,
}

/// Execution order of stage `s`: warm-up forwards, alternating
/// forward/backward, then cool-down backwards. With `v > 1` the
/// microbatches cycle through the local chunks in groups of `p`.
pub fn stage_order(p: usize, v: usize, m: usize, s: usize) -> Vec<Op> {
    let total = m * v;
    let op = |k: usize, phase: Phase| {
        let group = k % (p * v);
        let mut chunk = group / p;
        if phase == Phase::Backward {
            chunk = v - 1 - chunk;
        }
        let microbatch = if v == 1 { k } else { (k / (p * v)) * p + k % p };
        Op {
            phase,
            microbatch,
            chunk,
        }
    };
    let warmup = if v == 1 {
        p - s - 1
    } else {
        (p - s - 1) * 2 + (v - 1) * p
    }
    .min(total);
    let mut out = Vec::with_capacity(2 * total);
    out.extend((0..warmup).map(|k| op(k, Phase::Forward)));
    for i in 0..total - warmup {
        out.push(op(warmup + i, Phase::Forward));
        out.push(op(i, Phase::Backward));
    }
    out.extend((total - warmup..total).map(|k| op(k, Phase::Backward)));
    out
}

/// Simulate one training step. Each stage runs its ops in [`stage_order`];
/// an op starts once the stage is free and its cross-stage input (the
/// previous virtual stage's forward, or the next one's backward) is done.
pub fn simulate_pipeline(plan: &PipelinePlan, costs: &StageCostModel) -> Result<SimResult> {
    costs.validate()?;
    plan.validate(costs.layers())?;
    let (p, v, m) = (plan.p, plan.v, plan.m);
    let nv = plan.virtual_stages();
    let times: Vec<(f64, f64)> = (0..nv).map(|k| plan.chunk_times(costs, k)).collect();
    let orders: Vec<Vec<Op>> = (0..p).map(|s| stage_order(p, v, m, s)).collect();
    let mut fwd_end = vec![vec![None::<f64>; m]; nv];
    let mut bwd_end = vec![vec![None::<f64>; m]; nv];
    let mut next = vec![0usize; p];
    let mut free = vec![0.0f64; p];
    let mut busy = vec![0.0f64; p];
    let mut trace = Vec::with_capacity(2 * m * nv);
    let remaining = |next: &[usize]| next.iter().zip(&orders).any(|(&i, o)| i < o.len());
    while remaining(&next) {
        let mut progressed = false;
        for s in 0..p {
            while let Some(&op) = orders[s].get(next[s]) {
                let k = op.chunk * p + s;
                let dep = match op.phase {
                    Phase::Forward if k == 0 => Some(0.0),
                    Phase::Forward => fwd_end[k - 1][op.microbatch],
                    Phase::Backward if k + 1 == nv => fwd_end[k][op.microbatch],
                    Phase::Backward => bwd_end[k + 1][op.microbatch],
                };
                let Some(ready) = dep else { break };
                let dur = match op.phase {
                    Phase::Forward => times[k].0,
                    Phase::Backward => times[k].1,
                };
                let start = free[s].max(ready);
                let end = start + dur;
                match op.phase {
                    Phase::Forward => fwd_end[k][op.microbatch] = Some(end),
                    Phase::Backward => bwd_end[k][op.microbatch] = Some(end),
                }
                free[s] = end;
                busy[s] += dur;
                trace.push(TraceEvent {
                    stage: s,
                    phase: op.phase,
                    microbatch: op.microbatch,
                    chunk: op.chunk,
                    start,
                    end,
                });
                next[s] += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(PlanError::InvalidPlan("schedule deadlocks".into()));
        }
    }
    trace.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.stage.cmp(&b.stage)));
    let total_time = free.iter().copied().fold(0.0, f64::max);
    let mut critical_stage = 0;
    for (s, &b) in busy.iter().enumerate() {
        if b > busy[critical_stage] {
            critical_stage = s;
        }
    }
    let bubble_fraction = if total_time > 0.0 {
        (total_time - busy[critical_stage]) / total_time
    } else {
        0.0
    };
    Ok(SimResult {
        trace,
        total_time,
        busy,
        critical_stage,
        bubble_fraction,
    })
}

#[derive(Serialize)]
struct TraceRow {
    stage: usize,
    event: String,
    start: f64,
    end: f64,
}

/// CSV with columns `stage,event,start,end`; events read `F3` or `B3.1`
/// (microbatch, then chunk when interleaved).
pub fn write_trace_csv(path: &Path, trace: &[TraceEvent], interleaved: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in trace {
        let tag = match e.phase {
            Phase::Forward => 'F',
            Phase::Backward => 'B',
        };
        let event = if interleaved {
            format!("{tag}{}.{}", e.microbatch, e.chunk)
        } else {
            format!("{tag}{}", e.microbatch)
        };
        w.serialize(TraceRow {
            stage: e.stage,
            event,
            start: e.start,
            end: e.end,
        })?;
    }
    w.flush()?;
    Ok(())
}
