use std::path::Path;
use std::process::Command;

use compass_lab::eval::{default_suites, eval_report, write_eval_csv, EvalSuite, SuiteConfig};
use compass_moe::{MoEConfig, MoeModel};
use compass_quant::{quantize_recipe, EvalSlice, Grid, QuantConfig, Recipe};

fn lab(out: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_compass-lab"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(dir.path(), &["frobnicate"]), 2);
    assert_eq!(lab(dir.path(), &["plan-parallel", "--stages", "many"]), 2);
    assert_eq!(lab(dir.path(), &["--help"]), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"stages": 4, "no_such_key": 1}"#).unwrap();
    assert_eq!(
        lab(
            dir.path(),
            &["--config", cfg.to_str().unwrap(), "plan-parallel"]
        ),
        2
    );
    std::fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(
        lab(
            dir.path(),
            &["--config", cfg.to_str().unwrap(), "plan-parallel"]
        ),
        2
    );
    assert_eq!(
        lab(
            dir.path(),
            &["--config", "/nonexistent/cfg.json", "quantize"]
        ),
        2
    );
    // more stages than layers
    assert_eq!(
        lab(
            dir.path(),
            &["plan-parallel", "--layers", "2", "--stages", "4"]
        ),
        2
    );
    assert_eq!(lab(dir.path(), &["--jobs", "0", "quantize"]), 2);
}

#[test]
fn config_values_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plan.json");
    std::fs::write(&cfg, r#"{"seed": 9, "layers": 12, "stages": 3}"#).unwrap();
    assert_eq!(
        lab(
            dir.path(),
            &[
                "--config",
                cfg.to_str().unwrap(),
                "plan-parallel",
                "--stages",
                "2"
            ]
        ),
        0
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(dir.path().join("plan-parallel/manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["layers"], 12);
    assert_eq!(manifest["config"]["stages"], 2);
    assert!(manifest["git_describe"].is_string());
    assert!(manifest["metrics"]["uneven_max_stage_time"].is_number());
}

#[test]
fn identical_runs_write_identical_csvs() {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for r in &runs {
        assert_eq!(
            lab(
                r.path(),
                &[
                    "--seed",
                    "3",
                    "gen-synthetic",
                    "--n-shards",
                    "4",
                    "--n-tokens",
                    "5000",
                    "--sft-samples",
                    "8"
                ]
            ),
            0
        );
        assert_eq!(
            lab(
                r.path(),
                &["--seed", "3", "plan-parallel", "--recompute", "0,2"]
            ),
            0
        );
        assert_eq!(lab(r.path(), &["--seed", "3", "quantize"]), 0);
        assert_eq!(lab(r.path(), &["--seed", "3", "align", "--steps", "3"]), 0);
    }
    for f in [
        "gen-synthetic/unigram.csv",
        "gen-synthetic/metrics.csv",
        "gen-synthetic/sft.jsonl",
        "plan-parallel/trace_uniform.csv",
        "plan-parallel/memory.csv",
        "plan-parallel/metrics.csv",
        "quantize/comparison.csv",
        "quantize/metrics.csv",
        "align/align_log.csv",
        "align/metrics.csv",
    ] {
        assert_eq!(
            read(runs[0].path().join(f)),
            read(runs[1].path().join(f)),
            "{f}"
        );
    }
}

#[test]
fn pretrain_then_sft_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(lab(d, &["pretrain", "--steps", "5"]), 0);
    let model = d.join("pretrain/model");
    assert_eq!(
        lab(
            d,
            &["sft", "--steps", "3", "--init", model.to_str().unwrap()]
        ),
        0
    );
    let sft = d.join("sft/model");
    let sft = sft.to_str().unwrap();
    // expert-aware path: smoothing folds perturb only rounding
    assert_eq!(lab(d, &["eval", "--model", sft, "--grid", "identity"]), 0);
    let metrics: serde_json::Value =
        serde_json::from_slice(&read(d.join("eval/manifest.json"))).unwrap();
    assert!(
        metrics["metrics"]["max_quantized_row_delta"]
            .as_f64()
            .unwrap()
            < 1e-6
    );

    let naive = d.join("naive.json");
    std::fs::write(&naive, r#"{"expert_aware": false}"#).unwrap();
    assert_eq!(
        lab(
            d,
            &[
                "--config",
                naive.to_str().unwrap(),
                "eval",
                "--model",
                sft,
                "--grid",
                "identity"
            ]
        ),
        0
    );
    assert_eq!(
        read(d.join("eval/eval.csv")),
        read(d.join("eval/eval_quantized.csv"))
    );
}

fn tiny_model() -> MoeModel {
    let cfg = MoEConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_experts: 4,
        top_k: 2,
        d_ff: 16,
        max_seq_len: 32,
        ..MoEConfig::default()
    };
    MoeModel::init(cfg, 4).unwrap()
}

#[test]
fn empty_suite_list_gives_header_only_csv() {
    let rows = eval_report(&tiny_model(), &[]).unwrap();
    assert!(rows.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("eval.csv");
    write_eval_csv(&p, &rows).unwrap();
    assert_eq!(
        std::fs::read_to_string(p).unwrap(),
        "suite,slice,tokens,loss,accuracy\n"
    );
}

#[test]
fn one_row_per_suite_and_slice() {
    let cfg = SuiteConfig {
        languages: 3,
        sequences_per_slice: 2,
        seq_len: 16,
    };
    let mut suites = default_suites(&cfg, 1).unwrap();
    suites.push(EvalSuite {
        name: "empty".into(),
        slices: vec![EvalSlice {
            label: "none".into(),
            sequences: vec![],
        }],
    });
    let rows = eval_report(&tiny_model(), &suites).unwrap();
    assert_eq!(rows.len(), 3 + 2 + 1);
    let names: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| (r.suite.as_str(), r.slice.as_str()))
        .collect();
    assert_eq!(names[3], ("instruction", "ecommerce"));
    assert_eq!(rows[0].tokens, 2 * 15);
    let last = rows.last().unwrap();
    assert_eq!(last.tokens, 0);
    assert!(last.loss.is_nan());
    for r in &rows[..5] {
        assert!(r.loss > 0.0 && (0.0..=1.0).contains(&r.accuracy));
    }
}

#[test]
fn identity_grid_matches_full_precision_rows() {
    let model = tiny_model();
    let suites = default_suites(&SuiteConfig::default(), 2).unwrap();
    let calib: Vec<Vec<u32>> = suites
        .iter()
        .flat_map(|s| s.slices.iter().flat_map(|x| x.sequences.clone()))
        .collect();
    let q = QuantConfig {
        grid: Grid::Identity,
        ..QuantConfig::default()
    };
    let out = quantize_recipe(&model, &calib, &[], &q, Recipe::NAIVE).unwrap();
    assert_eq!(
        eval_report(&model, &suites).unwrap(),
        eval_report(&out.qmodel, &suites).unwrap()
    );
}

fn shipped<T: serde::de::DeserializeOwned>(name: &str) -> compass_lab::config::Loaded<T> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"));
    let value: serde_json::Value = serde_json::from_slice(&read(&path)).unwrap();
    compass_lab::config::parse(value).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn shipped_configs_parse() {
    use compass_lab::acceptance::AcceptanceConfig;
    use compass_lab::commands::{align, eval, gen, mixture, plan, pretrain, quantize, rm, sft};
    shipped::<gen::GenConfig>("gen-synthetic");
    shipped::<pretrain::PretrainConfig>("pretrain");
    shipped::<sft::SftConfig>("sft");
    assert!(shipped::<align::AlignConfig>("align").body.otpo.use_ot);
    shipped::<rm::RmTrainConfig>("rm-train");
    assert_eq!(
        shipped::<mixture::MixtureConfig>("mixture-search").jobs,
        Some(8)
    );
    shipped::<quantize::QuantizeConfig>("quantize");
    assert_eq!(
        shipped::<plan::PlanConfig>("plan-parallel")
            .body
            .recompute
            .len(),
        1
    );
    shipped::<eval::EvalConfig>("eval");
    assert_eq!(shipped::<AcceptanceConfig>("acceptance").seed, Some(0));
}

#[test]
fn nested_typos_are_rejected() {
    let v = serde_json::json!({"quant": {"tua": 4}});
    assert!(
        compass_lab::config::parse::<compass_lab::commands::quantize::QuantizeConfig>(v).is_err()
    );
}
