use compass_align::policy::response_logprobs;
use compass_align::reward::{curriculum_order, semantic_deviation};
use compass_align::*;
use compass_core::{AdamWConfig, Prng};
use compass_moe::{MoEConfig, MoeModel};

fn cfg() -> MoEConfig {
    MoEConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_experts: 4,
        top_k: 2,
        d_ff: 16,
        max_seq_len: 40,
        ..MoEConfig::default()
    }
}

fn model(seed: u64) -> MoeModel {
    MoeModel::init(cfg(), seed).unwrap()
}

fn toks(rng: &mut Prng, n: usize) -> Vec<u32> {
    (0..n).map(|_| 97 + rng.below(16) as u32).collect()
}

fn pairs(seed: u64, n: usize) -> Vec<PreferencePair> {
    let mut rng = Prng::new(seed);
    (0..n)
        .map(|_| {
            let (lp, lc, lr) = (
                3 + rng.below(4) as usize,
                2 + rng.below(8) as usize,
                2 + rng.below(8) as usize,
            );
            PreferencePair {
                prompt: toks(&mut rng, lp),
                chosen: toks(&mut rng, lc),
                rejected: toks(&mut rng, lr),
                chosen_source: Source::OffPolicy,
                rejected_source: Source::OnPolicy,
                domain: AlignDomain::Ecommerce,
            }
        })
        .collect()
}

#[test]
fn identical_policy_and_reference_give_ln2() {
    let reference = RefModel::new(model(1));
    let policy = model(1);
    let ps = pairs(2, 8);
    let cache = precompute_ref_logprobs(&ps, &reference).unwrap();
    for use_ot in [true, false] {
        let c = OtpoConfig {
            use_ot,
            ..OtpoConfig::default()
        };
        for p in &ps {
            let l = otpo_loss(&policy, p, &RefSource::Cache(&cache), &c).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() <= 1e-9, "{l}");
        }
    }
}

#[test]
fn uniform_weights_reduce_to_mean_token_dpo() {
    let reference = model(1);
    let policy = model(2);
    let refm = RefModel::new(reference);
    let c = OtpoConfig {
        use_ot: false,
        beta_dpo: 0.7,
        ..OtpoConfig::default()
    };
    for p in pairs(3, 10) {
        let d = |y: &[u32]| -> Vec<f64> {
            let pi = response_logprobs(&policy, &p.prompt, y).unwrap();
            let rf = response_logprobs(&refm.model, &p.prompt, y).unwrap();
            pi.iter()
                .zip(&rf)
                .map(|(&a, &b)| a as f64 - b as f64)
                .collect()
        };
        let want = mean_token_dpo_loss(&d(&p.chosen), &d(&p.rejected), c.beta_dpo);
        let got = otpo_loss(&policy, &p, &RefSource::Model(&refm), &c).unwrap();
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn raising_a_weighted_chosen_delta_lowers_loss() {
    let mut rng = Prng::new(4);
    for _ in 0..200 {
        let nc = 1 + rng.below(6) as usize;
        let nr = 1 + rng.below(6) as usize;
        let dc: Vec<f64> = (0..nc).map(|_| rng.normal()).collect();
        let dr: Vec<f64> = (0..nr).map(|_| rng.normal()).collect();
        let hc: Vec<f32> = (0..nc * 3).map(|_| rng.normal() as f32).collect();
        let hr: Vec<f32> = (0..nr * 3).map(|_| rng.normal() as f32).collect();
        let w = otpo_weights(&hc, &hr, 3, &OtConfig::default()).unwrap();
        let base = weighted_dpo_loss(&dc, &dr, &w, 0.5);
        for t in 0..nc {
            if w.chosen[t] > 0.0 {
                let mut up = dc.clone();
                up[t] += 1e-3;
                assert!(weighted_dpo_loss(&up, &dr, &w, 0.5) < base);
            }
        }
    }
}

#[test]
fn cache_is_bit_identical_and_round_trips() {
    let reference = RefModel::new(model(7));
    let ps = pairs(8, 6);
    let cache = precompute_ref_logprobs(&ps, &reference).unwrap();
    // one forward per distinct response
    assert_eq!(reference.forwards(), 12);
    for p in &ps {
        for y in [&p.chosen, &p.rejected] {
            let fresh = response_logprobs(&reference.model, &p.prompt, y).unwrap();
            let cached = cache.get(&p.prompt, y).unwrap();
            assert_eq!(
                fresh.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                cached.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert!(cached.iter().all(|&v| v <= 0.0));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    cache.save(dir.path()).unwrap();
    assert_eq!(RefLogProbCache::load(dir.path()).unwrap(), cache);
    assert!(matches!(
        cache.get(&[1, 2], &[3]),
        Err(AlignError::CacheMiss { .. })
    ));
}

#[test]
fn cached_training_runs_no_reference_forwards() {
    let ps = pairs(9, 4);
    let reference = RefModel::new(model(1));
    let cache = precompute_ref_logprobs(&ps, &reference).unwrap();
    let before = reference.forwards();
    let mut tr = OtpoTrainer::new(model(1), AdamWConfig::default(), OtpoConfig::default());
    for _ in 0..10 {
        tr.train_step(&ps, &RefSource::Cache(&cache), Some(&reference))
            .unwrap();
    }
    assert_eq!(reference.forwards(), before);
    let responses = 10 * 2 * ps.len() as u64;
    assert_eq!(tr.policy_forwards(), responses);

    let uncached = RefModel::new(model(1));
    let mut tr = OtpoTrainer::new(model(1), AdamWConfig::default(), OtpoConfig::default());
    for _ in 0..10 {
        tr.train_step(&ps, &RefSource::Model(&uncached), Some(&uncached))
            .unwrap();
    }
    assert_eq!(tr.policy_forwards() + uncached.forwards(), 2 * responses);
}

#[test]
fn training_widens_the_margin() {
    let ps = pairs(10, 6);
    let reference = RefModel::new(model(3));
    let cache = precompute_ref_logprobs(&ps, &reference).unwrap();
    let mut tr = OtpoTrainer::new(
        model(3),
        AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        OtpoConfig::default(),
    );
    let first = tr.train_step(&ps, &RefSource::Cache(&cache), None).unwrap();
    assert!((first.loss - std::f64::consts::LN_2).abs() < 1e-9);
    let mut last = first.clone();
    for _ in 0..30 {
        last = tr.train_step(&ps, &RefSource::Cache(&cache), None).unwrap();
    }
    assert!(
        last.margin > first.margin + 0.5,
        "{} -> {}",
        first.margin,
        last.margin
    );
    assert!(last.loss < first.loss);
}

fn scripted(table: Vec<Vec<u32>>) -> impl FnMut(&[u32], usize) -> Result<Vec<Vec<u32>>> {
    move |_: &[u32], n: usize| Ok(table.iter().take(n).cloned().collect())
}

#[test]
fn pair_builder_provenance_and_ties() {
    // score = number of 'z' tokens
    let scorer = |_: &[u32], y: &[u32]| -> Result<f64> {
        Ok(y.iter().filter(|&&t| t == 122).count() as f64)
    };
    let prompt = vec![(vec![97, 98], AlignDomain::Multilingual)];

    let mut on = scripted(vec![vec![97], vec![122, 97]]);
    let mut off = scripted(vec![vec![122, 122]]);
    let (p, _) = build_preference_pairs(&prompt, &mut on, &mut off, &scorer, 4).unwrap();
    assert_eq!(p[0].chosen_source, Source::OffPolicy);
    assert_eq!(p[0].rejected, vec![97]);

    let mut on = scripted(vec![vec![97], vec![122, 122, 122]]);
    let mut off = scripted(vec![vec![122]]);
    let (p, _) = build_preference_pairs(&prompt, &mut on, &mut off, &scorer, 4).unwrap();
    assert_eq!(p[0].chosen_source, Source::OnPolicy);

    // same candidates in an off-policy-only domain
    let agent = vec![(vec![97, 98], AlignDomain::Agent)];
    let mut on = scripted(vec![vec![97], vec![122, 122, 122]]);
    let mut off = scripted(vec![vec![122]]);
    let (p, _) = build_preference_pairs(&agent, &mut on, &mut off, &scorer, 4).unwrap();
    assert_eq!(
        (p[0].chosen_source, p[0].chosen.clone()),
        (Source::OffPolicy, vec![122])
    );

    // everything ties: chosen would not beat rejected, so the pair is dropped
    let mut on = scripted(vec![vec![97], vec![98]]);
    let mut off = scripted(vec![vec![99]]);
    let (p, stats) = build_preference_pairs(&prompt, &mut on, &mut off, &scorer, 4).unwrap();
    assert!(p.is_empty());
    assert_eq!(stats.discarded, 1);
}

#[test]
fn rejected_is_always_on_policy() {
    let policy = model(11);
    let rm = RewardModel::from_backbone(model(12));
    let mut scorer_rng = Prng::new(13);
    let salt: Vec<f64> = (0..256).map(|_| scorer_rng.normal()).collect();
    let score = |_: &[u32], y: &[u32]| -> Result<f64> {
        Ok(y.iter().map(|&t| salt[t as usize % 256]).sum::<f64>() + rm.score(&[97], y)?)
    };
    for seed in 0..4 {
        let mut rng = Prng::new(seed);
        let prompts: Vec<_> = (0..6)
            .map(|i| {
                let d = [
                    AlignDomain::Agent,
                    AlignDomain::InstructionFollowing,
                    AlignDomain::Ecommerce,
                    AlignDomain::Multilingual,
                ][i % 4];
                (toks(&mut rng, 4), d)
            })
            .collect();
        let mut sampler = PolicySampler {
            model: &policy,
            max_new: 6,
            temperature: 1.0,
            rng: Prng::new(seed).split(1),
        };
        let mut off_rng = Prng::new(seed).split(2);
        let mut off = move |_: &[u32], n: usize| -> Result<Vec<Vec<u32>>> {
            Ok((0..n).map(|_| toks(&mut off_rng, 5)).collect())
        };
        // keep the sampled on-policy candidates to audit against
        let mut seen: Vec<Vec<u32>> = Vec::new();
        let mut on = |x: &[u32], n: usize| -> Result<Vec<Vec<u32>>> {
            let c = sampler.candidates(x, n)?;
            seen.extend(c.iter().cloned());
            Ok(c)
        };
        let (ps, stats) = build_preference_pairs(&prompts, &mut on, &mut off, &score, 3).unwrap();
        assert_eq!(ps.len() + stats.discarded, prompts.len());
        for p in &ps {
            assert_eq!(p.rejected_source, Source::OnPolicy);
            assert!(seen.contains(&p.rejected));
            if p.domain.off_policy_only() {
                assert_eq!(p.chosen_source, Source::OffPolicy);
            }
        }
    }
}

#[test]
fn margin_loss_identities() {
    assert!((bt_loss(1.3, 0.8, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
    let mut prev = f64::NEG_INFINITY;
    for m in [0.0, 0.1, 0.5, 1.0, 3.0] {
        let l = bt_loss(0.4, 0.1, m);
        assert!(l > prev);
        prev = l;
    }
    let mut rm = RewardModel::from_backbone(model(1));
    let bad = RmConfig {
        margin: -0.1,
        ..RmConfig::default()
    };
    assert!(matches!(
        rm_train(&mut rm, &pairs(1, 2), &bad),
        Err(AlignError::NegativeMargin(_))
    ));
}

#[test]
fn zero_head_first_loss_is_analytic() {
    for m in [0.0, 0.5, 2.0] {
        let mut rm = RewardModel::from_backbone(model(5));
        let c = RmConfig {
            margin: m,
            epochs: 1,
            ..RmConfig::default()
        };
        let report = rm_train(&mut rm, &pairs(6, 8), &c).unwrap();
        let want = (1.0 + m.exp()).ln();
        assert!((report.losses[0] - want).abs() < 1e-12, "m={m}");
    }
}

#[test]
fn curriculum_visits_largest_deviation_first() {
    let rm = RewardModel::from_backbone(model(2));
    let ps = pairs(3, 12);
    let dev = semantic_deviation(&rm, &ps).unwrap();
    let order = curriculum_order(&dev, Curriculum::Descending);
    for w in order.windows(2) {
        assert!(dev[w[0]] >= dev[w[1]]);
    }
    assert_eq!(
        curriculum_order(&[0.5, 0.5, 0.7], Curriculum::Descending),
        vec![2, 0, 1]
    );
}

#[test]
fn pairs_jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let ps = pairs(4, 3);
    compass_align::pairs::write_pairs_jsonl(&path, &ps).unwrap();
    let line = std::fs::read_to_string(&path).unwrap();
    assert!(line.contains(r#""chosen_source":"off_policy""#));
    assert_eq!(compass_align::pairs::read_pairs_jsonl(&path).unwrap(), ps);
}

#[test]
fn separable_preferences_are_learned() {
    let train = separable_pairs(256, 1);
    let held_out = separable_pairs(128, 2);
    let mut rm = RewardModel::from_backbone(model(21));
    let t0 = std::time::Instant::now();
    let report = rm_train(&mut rm, &train, &RmConfig::default()).unwrap();
    let acc = pairwise_accuracy(&rm, &held_out).unwrap();
    eprintln!(
        "accuracy {acc} in {:?}, final loss {:?}",
        t0.elapsed(),
        report.losses.last()
    );
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}
