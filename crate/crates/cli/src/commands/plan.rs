use std::collections::BTreeSet;

use anyhow::Result;
use compass_planner::{
    a2a_time, memory_model, partition_uneven, simulate_pipeline, uniform_plan, write_trace_csv,
    CommModel, PipelinePlan, SimResult, StageCostModel,
};
use serde::{Deserialize, Serialize};

use super::resolve;
use crate::args::{Cli, PlanArgs};
use crate::config::{config_error, require};
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub layers: usize,
    pub stages: usize,
    /// Chunks per stage of the uniform plan (1 = plain 1F1B).
    pub chunks: usize,
    pub microbatches: usize,
    /// Per-layer costs; defaults to forward 1, backward 2 with embedding
    /// and loss extras on the end stages.
    pub costs: Option<StageCostModel>,
    pub recompute: BTreeSet<usize>,
    pub comm: CommModel,
    /// Payload of one expert-parallel all-to-all.
    pub a2a_bytes: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            layers: 16,
            stages: 4,
            chunks: 1,
            microbatches: 8,
            costs: None,
            recompute: BTreeSet::new(),
            comm: CommModel::default(),
            a2a_bytes: 1e9,
        }
    }
}

impl PlanConfig {
    pub fn cost_model(&self) -> StageCostModel {
        self.costs.clone().unwrap_or_else(|| {
            let mut c = StageCostModel::uniform(self.layers, 1.0, 2.0);
            c.embed_extra = 4.0;
            c.loss_extra = 6.0;
            c.recompute_factor = 1.0;
            c
        })
    }
}

#[derive(Debug, Serialize)]
struct PlanSummary<'a> {
    plan: &'a PipelinePlan,
    max_stage_time: f64,
    total_time: f64,
    bubble_fraction: f64,
    critical_stage: usize,
}

fn summary<'a>(plan: &'a PipelinePlan, costs: &StageCostModel, sim: &SimResult) -> PlanSummary<'a> {
    PlanSummary {
        plan,
        max_stage_time: plan.max_stage_time(costs),
        total_time: sim.total_time,
        bubble_fraction: sim.bubble_fraction,
        critical_stage: sim.critical_stage,
    }
}

pub fn run(cli: &Cli, args: &PlanArgs) -> Result<Outcome> {
    let mut r = resolve::<PlanConfig>(cli)?;
    let c = &mut r.cfg;
    c.layers = args.layers.unwrap_or(c.layers);
    c.stages = args.stages.unwrap_or(c.stages);
    c.chunks = args.chunks.unwrap_or(c.chunks);
    c.microbatches = args.microbatches.unwrap_or(c.microbatches);
    if let Some(rec) = &args.recompute {
        c.recompute = rec.iter().copied().collect();
    }
    require(
        c.stages >= 1 && c.chunks >= 1 && c.microbatches >= 1,
        || "stages, chunks and microbatches must be positive".into(),
    )?;
    require(c.recompute.iter().all(|&s| s < c.stages), || {
        "recompute names a stage out of range".into()
    })?;
    let cfg = r.cfg.clone();
    let costs = cfg.cost_model();
    costs.validate().map_err(|e| config_error(e.to_string()))?;
    require(costs.layers() == cfg.layers, || {
        format!(
            "costs describe {} layers, config says {}",
            costs.layers(),
            cfg.layers
        )
    })?;
    let uniform = uniform_plan(
        cfg.layers,
        cfg.stages,
        cfg.chunks,
        cfg.microbatches,
        cfg.recompute.clone(),
    )
    .map_err(|e| config_error(e.to_string()))?;
    let uneven = partition_uneven(&costs, cfg.stages, cfg.microbatches, cfg.recompute.clone())
        .map_err(|e| config_error(e.to_string()))?;
    let mut run = r.start(cli)?;

    let sim_u = simulate_pipeline(&uniform, &costs)?;
    let sim_e = simulate_pipeline(&uneven, &costs)?;
    write_trace_csv(&run.file("trace_uniform.csv"), &sim_u.trace, uniform.v > 1)?;
    write_trace_csv(&run.file("trace_uneven.csv"), &sim_e.trace, false)?;
    let mut mem_rows = Vec::new();
    for (label, plan) in [("uniform", &uniform), ("uneven", &uneven)] {
        for m in memory_model(plan, &costs)? {
            mem_rows.push((
                label,
                m.stage,
                m.weights,
                m.in_flight,
                m.peak_activations,
                m.peak,
            ));
        }
    }
    run.write_csv(
        "memory.csv",
        &[
            "plan",
            "stage",
            "weights",
            "in_flight",
            "peak_activations",
            "peak",
        ],
        &mem_rows,
    )?;
    run.write_json(
        "plan.json",
        &serde_json::json!({
            "costs": costs,
            "uniform": summary(&uniform, &costs, &sim_u),
            "uneven": summary(&uneven, &costs, &sim_e),
        }),
    )?;

    let mut inter = cfg.comm.clone();
    inter.ep_degree = inter.ep_degree.max(inter.gpus_per_node + 1);
    run.metric("uniform_max_stage_time", uniform.max_stage_time(&costs));
    run.metric("uneven_max_stage_time", uneven.max_stage_time(&costs));
    run.metric("uniform_total_time", sim_u.total_time);
    run.metric("uneven_total_time", sim_e.total_time);
    run.metric("uniform_bubble_fraction", sim_u.bubble_fraction);
    run.metric("uneven_bubble_fraction", sim_e.bubble_fraction);
    run.metric("uneven_cuts", uneven.cuts());
    run.metric("a2a_time", a2a_time(cfg.a2a_bytes, &cfg.comm)?);
    run.metric("a2a_time_cross_node", a2a_time(cfg.a2a_bytes, &inter)?);
    run.finish(&cfg)?;

    let mut failures = Vec::new();
    if uneven.max_stage_time(&costs) > uniform.max_stage_time(&costs) + 1e-9 && cfg.chunks == 1 {
        failures.push("uneven partition is slower than the uniform split".into());
    }
    Ok(Outcome { failures })
}
