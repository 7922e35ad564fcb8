use compass_core::{Prng, Session};
use compass_moe::{MoEConfig, MoeModel, NoHook, Site, TokenBatch};
use compass_quant::*;
use proptest::prelude::*;

/// Nearest finite E4M3 value by exhaustive search; ties go to the even code.
fn oracle_round(x: f32) -> f32 {
    let mut best: Option<(f64, u8, f32)> = None;
    for (code, v) in Fp8E4M3::grid() {
        let dist = (x as f64 - v as f64).abs();
        let better = match best {
            None => true,
            Some((d, c, _)) => dist < d || (dist == d && c & 1 == 1 && code & 1 == 0),
        };
        if better {
            best = Some((dist, code, v));
        }
    }
    best.unwrap().2
}

fn same(a: f32, b: f32) -> bool {
    a == b || (a == 0.0 && b == 0.0)
}

#[test]
fn grid_has_254_finite_codes_and_is_symmetric() {
    let grid = Fp8E4M3::grid();
    assert_eq!(grid.len(), 254);
    for &(code, v) in &grid {
        assert_eq!(Fp8E4M3::decode(code ^ 0x80), Some(-v));
    }
    let max = grid.iter().map(|g| g.1).fold(0.0f32, f32::max);
    let min_pos = grid
        .iter()
        .map(|g| g.1)
        .filter(|&v| v > 0.0)
        .fold(f32::MAX, f32::min);
    assert_eq!(max, E4M3_MAX);
    assert_eq!(min_pos, 2f32.powi(-9));
}

#[test]
fn qdq_is_idempotent_on_every_code() {
    for (code, v) in Fp8E4M3::grid() {
        let once = fp8_qdq(v, 1.0).unwrap();
        assert!(same(once, v), "code {code:#04x}");
        assert!(same(fp8_qdq(once, 1.0).unwrap(), once));
        let back = Fp8E4M3::encode(v).unwrap();
        assert!(
            back == code || v == 0.0,
            "code {code:#04x} re-encoded as {back:#04x}"
        );
        // scaled grids are just as exact
        assert!(same(fp8_qdq(v * 0.25, 0.25).unwrap(), v * 0.25));
    }
}

#[test]
fn rounding_examples_match_the_enumerated_grid() {
    assert_eq!(fp8_qdq(0.0, 1.0).unwrap(), 0.0);
    assert_eq!(fp8_qdq(448.0, 1.0).unwrap(), 448.0);
    assert_eq!(fp8_qdq(1.0625, 1.0).unwrap(), oracle_round(1.0625));
    assert_eq!(fp8_qdq(1e9, 1.0).unwrap(), 448.0);
    assert!(fp8_qdq(f32::INFINITY, 1.0).is_err());
    assert!(fp8_qdq(1.0, -1.0).is_err());
    // every midpoint between neighbours is a tie
    let mut vals: Vec<f32> = Fp8E4M3::grid()
        .into_iter()
        .map(|g| g.1)
        .filter(|&v| v >= 0.0)
        .collect();
    vals.sort_by(f32::total_cmp);
    vals.dedup();
    for w in vals.windows(2) {
        let mid = (w[0] + w[1]) / 2.0;
        assert_eq!(
            round_e4m3(mid).unwrap(),
            oracle_round(mid),
            "midpoint {mid}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rounding_matches_exhaustive_oracle(m in -1.0f32..1.0, e in -12i32..10) {
        let x = m * 2f32.powi(e);
        prop_assert!(same(round_e4m3(x).unwrap(), oracle_round(x)), "x = {x}");
    }

    #[test]
    fn qdq_is_idempotent_for_any_scale(x in -1e4f32..1e4, s in 1e-3f32..1e2) {
        let once = fp8_qdq(x, s).unwrap();
        prop_assert_eq!(fp8_qdq(once, s).unwrap(), once);
    }
}

fn skew(cfg: SkewConfig) -> SkewScenario {
    SkewScenario::build(&cfg).unwrap()
}

#[test]
fn empty_calibration_has_zero_counts() {
    let sc = skew(SkewConfig::default());
    let stats = collect_calibration(&sc.model, &[]).unwrap();
    assert_eq!(stats.tokens, 0);
    assert!(stats.counts.values().all(|c| c.iter().all(|&n| n == 0)));
    assert!(stats.site_max.is_empty());
}

#[test]
fn counts_sum_to_tokens_times_k_and_chunking_is_irrelevant() {
    let sc = skew(SkewConfig::default());
    let all = collect_calibration(&sc.model, &sc.calib).unwrap();
    let k = sc.model.cfg.top_k as u64;
    for c in all.counts.values() {
        assert_eq!(c.iter().sum::<u64>(), all.tokens * k);
    }
    let (a, b) = sc.calib.split_at(7);
    let merged = collect_calibration(&sc.model, a)
        .unwrap()
        .merge(collect_calibration(&sc.model, b).unwrap());
    assert_eq!(merged.counts, all.counts);
    assert_eq!(merged.site_max, all.site_max);
    assert_eq!(merged.tokens, all.tokens);
}

/// Two experts, top-1: the common language routes to expert 0 and the rare
/// one to expert 1, so the calibration mix sets the routing skew.
fn two_expert() -> SkewScenario {
    skew(SkewConfig {
        n_experts: 2,
        top_k: 1,
        calib_common: 9,
        calib_rare: 1,
        ..Default::default()
    })
}

#[test]
fn injected_skew_is_reproduced() {
    let sc = two_expert();
    let stats = collect_calibration(&sc.model, &sc.calib).unwrap();
    let c = &stats.counts[&0];
    let share = c[1] as f64 / (c[0] + c[1]) as f64;
    assert!((share - 0.1).abs() <= 0.05 * 0.1, "rare share {share}");
}

#[test]
fn ninety_ten_skew_balances_to_tau() {
    let sc = two_expert();
    let stats = collect_calibration(&sc.model, &sc.calib).unwrap();
    let b = balance_calibration(&stats, &sc.calib, &sc.pool, &sc.model, 50).unwrap();
    assert!(b.counts[&0].iter().all(|&n| n >= 50), "{:?}", b.counts);
    assert!(!b.added.is_empty());
    // final counts are what a fresh calibration pass sees
    let again = collect_calibration(&sc.model, &b.sequences).unwrap();
    assert_eq!(again.counts, b.counts);
}

#[test]
fn balanced_input_is_returned_unchanged() {
    let sc = skew(SkewConfig::default());
    let stats = collect_calibration(&sc.model, &sc.calib).unwrap();
    let b = balance_calibration(&stats, &sc.calib, &sc.pool, &sc.model, 1).unwrap();
    assert!(b.added.is_empty());
    assert_eq!(b.sequences, sc.calib);
    assert_eq!(b.counts, stats.counts);
    assert!(balance_calibration(&stats, &sc.calib, &sc.pool, &sc.model, 0).is_err());
}

#[test]
fn unreachable_expert_is_named() {
    let sc = skew(SkewConfig::default());
    let stats = collect_calibration(&sc.model, &sc.calib).unwrap();
    // a pool with no sequence that reaches the rare expert
    let routed = route_counts(&sc.model, &sc.pool).unwrap();
    let common_pool: Vec<Vec<u32>> = sc
        .pool
        .iter()
        .zip(&routed)
        .filter(|(_, c)| c[&0][sc.rare_expert] == 0)
        .map(|(s, _)| s.clone())
        .collect();
    assert!(common_pool.len() < sc.pool.len());
    match balance_calibration(&stats, &sc.calib, &common_pool, &sc.model, 128) {
        Err(QuantError::Unbalanced {
            layer,
            expert,
            count,
            tau,
        }) => {
            assert_eq!((layer, expert, tau), (0, sc.rare_expert, 128));
            assert_eq!(count, stats.counts[&0][sc.rare_expert]);
        }
        other => panic!("expected Unbalanced, got {other:?}"),
    }
}

#[test]
fn smoothing_formula_endpoints() {
    let mut stats = CalibrationStats::default();
    stats
        .site_max
        .insert(Site::Router(0), vec![2.0, 0.5, 0.0, 3.0]);
    stats.w_max.insert(0, vec![2.0, 0.5, 1.0, 0.0]);
    let s = compute_smoothing(&stats, 0.5).unwrap();
    assert_eq!(s.vectors[&0], vec![1.0, 1.0, 1.0, 1.0]);
    let s = compute_smoothing(&stats, 1.0).unwrap();
    assert_eq!(s.vectors[&0], vec![2.0, 0.5, 1.0, 1.0]);
    let s = compute_smoothing(&stats, 0.0).unwrap();
    assert_eq!(s.vectors[&0], vec![0.5, 2.0, 1.0, 1.0]);
    assert!(compute_smoothing(&stats, 1.5).is_err());
}

#[test]
fn weight_maxima_are_joint_over_router_and_experts() {
    let model = MoeModel::init(
        MoEConfig {
            d_model: 8,
            n_experts: 3,
            top_k: 2,
            d_ff: 12,
            mtp_depth: 0,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let w = weight_maxima(&model);
    for l in 0..model.cfg.n_layers {
        let (router, experts) = model.expert_weights(l);
        let rows = |m: &[f32], j: usize| -> f32 {
            let cols = m.len() / 8;
            m[j * cols..(j + 1) * cols]
                .iter()
                .fold(0.0f32, |a, v| a.max(v.abs()))
        };
        for j in 0..8 {
            let mut want = rows(router, j);
            for (g, u, _) in &experts {
                want = want.max(rows(g, j)).max(rows(u, j));
            }
            assert_eq!(w[&l][j], want);
        }
    }
}

fn max_rel_dev(a: &MoeModel, b: &MoeModel, seqs: &[Vec<u32>]) -> f32 {
    let batch = TokenBatch::from_sequences(seqs).unwrap();
    let x = fp32_logits(a, &batch).unwrap();
    let y = fp32_logits(b, &batch).unwrap();
    let scale = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    x.data()
        .iter()
        .zip(y.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f32::max)
        / scale
}

#[test]
fn unit_smoothing_leaves_the_model_unchanged() {
    let sc = skew(SkewConfig::default());
    let s = Smoothing {
        alpha: 0.5,
        vectors: [(0, vec![1.0; sc.model.cfg.d_model])].into(),
    };
    let folded = fold_smoothing(&sc.model, &s).unwrap();
    for ((_, _, a), (_, _, b)) in sc.model.params.iter().zip(folded.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn folding_preserves_outputs(seed in any::<u64>(), spread in 0.0f64..3.0) {
        let model = MoeModel::init(
            MoEConfig { d_model: 16, n_layers: 2, n_experts: 4, top_k: 2, d_ff: 16, max_seq_len: 16, mtp_depth: 0, ..Default::default() },
            seed,
        ).unwrap();
        let mut rng = Prng::new(seed ^ 0xF01D);
        let vectors = (0..2)
            .map(|l| (l, (0..16).map(|_| (spread * (2.0 * rng.uniform() - 1.0)).exp() as f32).collect()))
            .collect();
        let folded = fold_smoothing(&model, &Smoothing { alpha: 0.5, vectors }).unwrap();
        let seqs: Vec<Vec<u32>> = (0..4).map(|_| (0..16).map(|_| rng.below(256) as u32).collect()).collect();
        let dev = max_rel_dev(&model, &folded, &seqs);
        prop_assert!(dev <= 1e-5, "relative deviation {dev}");
    }
}

#[test]
fn computed_smoothing_on_the_skewed_model_preserves_outputs() {
    let sc = skew(SkewConfig::default());
    let stats = collect_calibration(&sc.model, &sc.calib).unwrap();
    let s = compute_smoothing(&stats, 0.5).unwrap();
    let folded = fold_smoothing(&sc.model, &s).unwrap();
    let seqs: Vec<Vec<u32>> = sc.eval.iter().flat_map(|e| e.sequences.clone()).collect();
    assert!(max_rel_dev(&sc.model, &folded, &seqs) <= 1e-5);
}

#[test]
fn two_channel_single_expert_fold_by_hand() {
    let cfg = MoEConfig {
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        n_experts: 1,
        top_k: 1,
        d_ff: 3,
        max_seq_len: 8,
        mtp_depth: 0,
        ..Default::default()
    };
    let mut model = MoeModel::init(cfg, 1).unwrap();
    let ids = model.ids.layers[0].clone();
    model.params.assign(ids.ffn_norm, &[2.0, 3.0]).unwrap();
    model
        .params
        .assign(ids.router.unwrap(), &[0.5, -1.0])
        .unwrap();
    model
        .params
        .assign(ids.experts[0].w_gate, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap();
    model
        .params
        .assign(ids.experts[0].w_up, &[-1.0, 0.0, 1.0, 2.0, -2.0, 0.5])
        .unwrap();
    let down_before = model.params.get(ids.experts[0].w_down).data().to_vec();
    let s = Smoothing {
        alpha: 0.5,
        vectors: [(0, vec![2.0, 0.5])].into(),
    };
    let f = fold_smoothing(&model, &s).unwrap();
    let get = |id| f.params.get(id).data().to_vec();
    assert_eq!(get(ids.ffn_norm), vec![1.0, 6.0]);
    assert_eq!(get(ids.router.unwrap()), vec![1.0, -0.5]);
    assert_eq!(
        get(ids.experts[0].w_gate),
        vec![2.0, 4.0, 6.0, 2.0, 2.5, 3.0]
    );
    assert_eq!(
        get(ids.experts[0].w_up),
        vec![-2.0, 0.0, 2.0, 1.0, -1.0, 0.25]
    );
    assert_eq!(get(ids.experts[0].w_down), down_before);
}

#[test]
fn identity_grid_gives_zero_deltas() {
    let sc = skew(SkewConfig::default());
    let cfg = QuantConfig {
        grid: Grid::Identity,
        ..Default::default()
    };
    let out = quantize_recipe(&sc.model, &sc.calib, &sc.pool, &cfg, Recipe::NAIVE).unwrap();
    let rep = report_error(&sc.model, &out.qmodel, &sc.eval).unwrap();
    assert_eq!(rep.len(), sc.eval.len());
    for r in &rep {
        assert_eq!(r.logit_mse, 0.0);
        assert_eq!(r.accuracy_delta(), 0.0);
        assert_eq!(r.top1_agreement, 1.0);
    }
}

#[test]
fn missing_expert_calibration_is_an_error() {
    let sc = skew(SkewConfig::default());
    let common: Vec<Vec<u32>> = sc.calib[..sc.calib.len() - 1].to_vec();
    let stats = collect_calibration(&sc.model, &common).unwrap();
    assert_eq!(stats.counts[&0][sc.rare_expert], 0);
    let err = QuantScheme::build(&sc.model, &stats, Grid::E4m3, None, None).unwrap_err();
    assert!(
        matches!(err, QuantError::MissingCalibration(ref s) if s.contains("ExpertIn(0, 3)")),
        "{err}"
    );
    let err = quantize_recipe(
        &sc.model,
        &common,
        &[],
        &QuantConfig::default(),
        Recipe::NAIVE,
    )
    .unwrap_err();
    assert!(matches!(err, QuantError::MissingCalibration(_)));
}

#[test]
fn expert_aware_beats_naive_on_every_slice() {
    let sc = skew(SkewConfig::default());
    let cfg = QuantConfig::default();
    let naive = quantize_recipe(&sc.model, &sc.calib, &sc.pool, &cfg, Recipe::NAIVE).unwrap();
    let aware =
        quantize_recipe(&sc.model, &sc.calib, &sc.pool, &cfg, Recipe::EXPERT_AWARE).unwrap();
    let b = aware.balanced.as_ref().unwrap();
    assert!(b.counts[&0].iter().all(|&n| n >= cfg.tau));
    let rn = report_error(&sc.model, &naive.qmodel, &sc.eval).unwrap();
    let ra = report_error(&sc.model, &aware.qmodel, &sc.eval).unwrap();
    for (n, a) in rn.iter().zip(&ra) {
        assert!(
            a.logit_mse <= n.logit_mse,
            "{}: {} > {}",
            n.slice,
            a.logit_mse,
            n.logit_mse
        );
        if n.slice == sc.rare_slice {
            assert!(a.logit_mse < n.logit_mse);
        }
    }
}

#[test]
fn quantized_weights_lie_on_the_scaled_grid() {
    let sc = skew(SkewConfig::default());
    let out = quantize_recipe(
        &sc.model,
        &sc.calib,
        &sc.pool,
        &QuantConfig::default(),
        Recipe::NAIVE,
    )
    .unwrap();
    let q = &out.qmodel.model;
    for (name, scales) in &out.scheme.weight_scales {
        let t = q.params.get(q.params.id(name).unwrap());
        for row in t.data().chunks(t.cols()) {
            for (&w, &s) in row.iter().zip(scales) {
                assert!(same(fp8_qdq(w, s).unwrap(), w), "{name}");
                assert!(w.abs() <= E4M3_MAX * s * (1.0 + 1e-6));
            }
        }
    }
    // the quantized model is a different function
    let batch = TokenBatch::from_sequences(&sc.eval[0].sequences).unwrap();
    let mut sess = Session::inference(&sc.model.params);
    let f = sc
        .model
        .forward_backbone(&mut sess, &batch, &mut NoHook)
        .unwrap();
    assert_ne!(
        sess.tape.data(f.logits),
        out.qmodel.logits(&batch).unwrap().data()
    );
}

#[test]
fn scheme_and_report_files_round_trip() {
    let sc = skew(SkewConfig::default());
    let out = quantize_recipe(
        &sc.model,
        &sc.calib,
        &sc.pool,
        &QuantConfig::default(),
        Recipe::EXPERT_AWARE,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.scheme.save(dir.path()).unwrap();
    let back = QuantScheme::load(dir.path()).unwrap();
    assert_eq!(back, out.scheme);
    let rep = report_error(&sc.model, &out.qmodel, &sc.eval).unwrap();
    let path = dir.path().join("report.csv");
    write_report_csv(&path, &rep).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("slice,metric,fp32_value,quant_value,delta")
    );
    assert_eq!(lines.count(), 3 * rep.len());
}
