use compass_align::ot::{cost_matrix, unbalanced_objective};
use compass_align::*;
use compass_core::Prng;
use proptest::prelude::*;

fn simplex(rng: &mut Prng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn converged_plans_are_feasible(n in 1usize..7, m in 1usize..7, eps in 0.05f64..2.0, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let a = simplex(&mut rng, n);
        let b = simplex(&mut rng, m);
        let c: Vec<f64> = (0..n * m).map(|_| rng.uniform()).collect();
        let p = sinkhorn(&c, &a, &b, eps, 5000, 1e-4).unwrap();
        prop_assert!(p.plan.iter().all(|&x| x >= 0.0));
        prop_assert!(p.converged);
        prop_assert!(p.max_violation <= 1e-4);
    }

    #[test]
    fn weights_are_distributions(nc in 1usize..6, nr in 1usize..6, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let d = 4;
        let h = |rng: &mut Prng, n: usize| (0..n * d).map(|_| rng.normal() as f32).collect::<Vec<_>>();
        let (hc, hr) = (h(&mut rng, nc), h(&mut rng, nr));
        let w = otpo_weights(&hc, &hr, d, &OtConfig::default()).unwrap();
        for side in [&w.chosen, &w.rejected] {
            prop_assert!(side.iter().all(|&x| x >= 0.0));
            prop_assert!((side.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn large_epsilon_plan_is_outer_product() {
    let mut rng = Prng::new(5);
    let (a, b) = (simplex(&mut rng, 4), simplex(&mut rng, 3));
    let c: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
    let p = sinkhorn(&c, &a, &b, 1e6, 100, 1e-12).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((p.plan[i * 3 + j] - a[i] * b[j]).abs() < 1e-4);
        }
    }
}

#[test]
fn large_epsilon_weights_are_uniform() {
    let mut rng = Prng::new(6);
    let hc: Vec<f32> = (0..5 * 3).map(|_| rng.normal() as f32).collect();
    let hr: Vec<f32> = (0..2 * 3).map(|_| rng.normal() as f32 * 3.0).collect();
    let cfg = OtConfig {
        epsilon: 1e6,
        ..OtConfig::default()
    };
    let w = otpo_weights(&hc, &hr, 3, &cfg).unwrap();
    assert!(w.chosen.iter().all(|x| (x - 0.2).abs() < 1e-4));
    assert!(w.rejected.iter().all(|x| (x - 0.5).abs() < 1e-4));
}

#[test]
fn anti_diagonal_two_by_two() {
    let p = sinkhorn(
        &[0.0, 1.0, 1.0, 0.0],
        &[0.5, 0.5],
        &[0.5, 0.5],
        0.01,
        1000,
        1e-10,
    )
    .unwrap();
    // closed form: off-diagonal mass 1/(1 + e^{1/ε})
    let off = p.plan[1] + p.plan[2];
    assert!(off <= 1e-3);
    assert!((off - 1.0 / (1.0 + (100f64).exp())).abs() < 1e-12);
}

/// Direct minimization of the relaxed objective by gradient descent on
/// `log P`, independent of the scaling iterations.
fn brute_force_plan(c: &[f64], a: &[f64], b: &[f64], eps: f64, rho: f64) -> Vec<f64> {
    let (n, m) = (a.len(), b.len());
    let mut theta: Vec<f64> = (0..n * m).map(|k| (a[k / m] * b[k % m]).ln()).collect();
    for _ in 0..400_000 {
        let p: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let rows: Vec<f64> = p.chunks(m).map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..m).map(|j| (0..n).map(|i| p[i * m + j]).sum()).collect();
        let mut gmax: f64 = 0.0;
        for i in 0..n {
            for j in 0..m {
                let k = i * m + j;
                let g = c[k]
                    + eps * (p[k] / (a[i] * b[j])).ln()
                    + rho * (rows[i] / a[i]).ln()
                    + rho * (cols[j] / b[j]).ln();
                gmax = gmax.max(g.abs());
                theta[k] -= 0.05 * g;
            }
        }
        if gmax < 1e-13 {
            break;
        }
    }
    theta.iter().map(|t| t.exp()).collect()
}

#[test]
fn crafted_two_by_three_matches_brute_force() {
    let hc = [0.0f32, 0.0, 1.0, 0.5];
    let hr = [0.1f32, 0.0, 2.0, -1.0, 1.0, 0.4];
    let cfg = OtConfig {
        epsilon: 0.2,
        rho: 1.0,
        max_iter: 100_000,
        tol: 1e-14,
    };
    let c = cost_matrix(&hc, &hr, 2);
    let (a, b) = (vec![0.5; 2], vec![1.0 / 3.0; 3]);
    let oracle = brute_force_plan(&c, &a, &b, cfg.epsilon, cfg.rho);
    let plan =
        compass_align::sinkhorn_unbalanced(&c, &a, &b, cfg.epsilon, cfg.rho, cfg.max_iter, cfg.tol)
            .unwrap();
    assert!(plan.converged);
    for (x, y) in plan.plan.iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
    let f_plan = unbalanced_objective(&c, &a, &b, cfg.epsilon, cfg.rho, &plan.plan);
    let f_oracle = unbalanced_objective(&c, &a, &b, cfg.epsilon, cfg.rho, &oracle);
    assert!((f_plan - f_oracle).abs() < 1e-12);

    let w = otpo_weights(&hc, &hr, 2, &cfg).unwrap();
    let rows: Vec<f64> = oracle.chunks(3).map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..3).map(|j| oracle[j] + oracle[3 + j]).collect();
    let (sr, sc) = (rows.iter().sum::<f64>(), cols.iter().sum::<f64>());
    for (x, y) in w.chosen.iter().zip(&rows) {
        assert!((x - y / sr).abs() < 1e-6);
    }
    for (x, y) in w.rejected.iter().zip(&cols) {
        assert!((x - y / sc).abs() < 1e-6);
    }
    // the far-away rejected token gets less mass than the near ones
    assert!(w.rejected[1] < w.rejected[0] && w.rejected[1] < w.rejected[2]);
}
