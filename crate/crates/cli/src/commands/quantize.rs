use anyhow::Result;
use compass_quant::{
    quantize_recipe, report_error, write_report_csv, QuantConfig, Recipe, SkewConfig, SkewScenario,
    SliceReport,
};
use serde::{Deserialize, Serialize};

use super::resolve;
use crate::args::{Cli, QuantizeArgs};
use crate::config::require;
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeConfig {
    /// Scenario shape; its seed is replaced by the run seed.
    pub scenario: SkewConfig,
    pub quant: QuantConfig,
}

/// Naive and expert-aware reports on the scenario's slices, in slice order.
pub struct QuantComparison {
    pub scenario: SkewScenario,
    pub naive: Vec<SliceReport>,
    pub aware: Vec<SliceReport>,
    pub min_balanced_count: u64,
    pub outcome: compass_quant::QuantOutcome,
}

pub fn compare_recipes(scenario: &SkewConfig, quant: &QuantConfig) -> Result<QuantComparison> {
    let sc = SkewScenario::build(scenario)?;
    let naive = quantize_recipe(&sc.model, &sc.calib, &sc.pool, quant, Recipe::NAIVE)?;
    let aware = quantize_recipe(&sc.model, &sc.calib, &sc.pool, quant, Recipe::EXPERT_AWARE)?;
    let min_balanced_count = aware.balanced.as_ref().map_or(0, |b| {
        b.counts.values().flatten().copied().min().unwrap_or(0)
    });
    Ok(QuantComparison {
        naive: report_error(&sc.model, &naive.qmodel, &sc.eval)?,
        aware: report_error(&sc.model, &aware.qmodel, &sc.eval)?,
        scenario: sc,
        min_balanced_count,
        outcome: aware,
    })
}

pub fn run(cli: &Cli, args: &QuantizeArgs) -> Result<Outcome> {
    let mut r = resolve::<QuantizeConfig>(cli)?;
    let c = &mut r.cfg;
    c.quant.tau = args.tau.unwrap_or(c.quant.tau);
    c.quant.alpha = args.alpha.unwrap_or(c.quant.alpha);
    if let Some(g) = args.grid {
        c.quant.grid = g.into();
    }
    c.scenario.seed = r.seed;
    require(c.quant.tau > 0, || "tau must be positive".into())?;
    require((0.0..=1.0).contains(&c.quant.alpha), || {
        "alpha must be in [0, 1]".into()
    })?;
    require(
        c.scenario.n_experts >= 2
            && c.scenario.top_k >= 1
            && c.scenario.top_k <= c.scenario.n_experts,
        || "scenario needs n_experts >= 2 and 1 <= top_k <= n_experts".into(),
    )?;
    let cfg = r.cfg.clone();
    let mut run = r.start(cli)?;

    let cmp = compare_recipes(&cfg.scenario, &cfg.quant)?;
    write_report_csv(&run.file("report_naive.csv"), &cmp.naive)?;
    write_report_csv(&run.file("report_expert_aware.csv"), &cmp.aware)?;
    let rows: Vec<(String, f64, f64)> = cmp
        .naive
        .iter()
        .zip(&cmp.aware)
        .map(|(n, a)| (n.slice.clone(), n.logit_mse, a.logit_mse))
        .collect();
    run.write_csv(
        "comparison.csv",
        &["slice", "naive_logit_mse", "expert_aware_logit_mse"],
        &rows,
    )?;
    run.file("scheme/scheme.json");
    run.file("scheme/scales.bin");
    cmp.outcome.scheme.save(&run.dir.join("scheme"))?;

    run.metric("rare_slice", &cmp.scenario.rare_slice);
    run.metric("rare_expert", cmp.scenario.rare_expert);
    run.metric("min_balanced_count", cmp.min_balanced_count);
    run.metric(
        "calibration_sequences_added",
        cmp.outcome.balanced.as_ref().map_or(0, |b| b.added.len()),
    );
    for (n, a) in cmp.naive.iter().zip(&cmp.aware) {
        run.metric(&format!("naive_logit_mse.{}", n.slice), n.logit_mse);
        run.metric(&format!("expert_aware_logit_mse.{}", a.slice), a.logit_mse);
    }
    run.finish(&cfg)?;
    Ok(Outcome::ok())
}
