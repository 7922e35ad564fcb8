use compass_core::synthetic::{render_template, TemplateFamily};
use compass_core::tokenizer::{EOT, PAD};
use compass_core::{AdamWConfig, Prng, Session};
use compass_moe::{batch::PAD_SEGMENT, MoEConfig, MoeError, MoeModel, NoHook, Trainer};
use compass_sft::*;

fn random_sample(rng: &mut Prng, max_total: usize) -> SftSample {
    let y = 1 + rng.below(max_total.min(10) as u64 - 1) as usize;
    let x = rng.below((max_total - 1 - y) as u64 + 1) as usize;
    let toks = |rng: &mut Prng, n: usize| (0..n).map(|_| rng.below(256) as u32).collect::<Vec<_>>();
    let domain = if rng.below(2) == 0 {
        Domain::Ecommerce
    } else {
        Domain::General
    };
    let px = toks(rng, x);
    let ay = toks(rng, y);
    SftSample::new(px, ay, domain)
}

fn ones(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

#[test]
fn mask_cardinality_on_1000_samples() {
    let mut rng = Prng::new(11);
    for i in 0..1000 {
        let s = random_sample(&mut rng, 40);
        let m = build_loss_mask(&s, i).unwrap();
        assert_eq!(m.len(), s.len());
        let (x, y) = (s.prompt.len(), s.answer.len());
        let want = match s.domain {
            Domain::General => y,
            Domain::Ecommerce => x + y,
        };
        assert_eq!(ones(&m), want, "sample {i}");
        // trained positions predict answer tokens (general) or everything after BOS
        let first = m.iter().position(|&b| b).unwrap();
        assert_eq!(first, if s.domain == Domain::General { x } else { 0 });

        let flip = |d| SftSample::new(s.prompt.clone(), s.answer.clone(), d);
        let e = ones(&build_loss_mask(&flip(Domain::Ecommerce), i).unwrap());
        let g = ones(&build_loss_mask(&flip(Domain::General), i).unwrap());
        assert_eq!(e - g, x);
    }
}

#[test]
fn one_full_length_sample_fills_one_pack() {
    let s = SftSample::new(vec![1; 7], vec![2; 8], Domain::General);
    let packs = pack_samples(&[s], 16).unwrap();
    assert_eq!(packs.len(), 1);
    assert_eq!(packs[0].pad_count, 0);
}

#[test]
fn packing_conserves_tokens_on_1000_corpora() {
    for seed in 0..1000u64 {
        let mut rng = Prng::new(seed).split(7);
        let max_len = 8 + rng.below(57) as usize;
        let n = 1 + rng.below(30) as usize;
        let samples: Vec<_> = (0..n).map(|_| random_sample(&mut rng, max_len)).collect();
        let packs = pack_samples(&samples, max_len).unwrap();

        let mut seen = vec![0usize; n];
        let mut non_pad = 0;
        for p in &packs {
            assert_eq!(p.len(), max_len);
            let mut at = 0;
            for (slot, &i) in p.sample_ids.iter().enumerate() {
                seen[i] += 1;
                let s = &samples[i];
                // whole sample, contiguous and untruncated
                assert_eq!(&p.tokens[at..at + s.len()], &s.tokens()[..]);
                assert!(p.segments[at..at + s.len()]
                    .iter()
                    .all(|&g| g == slot as u32));
                assert_eq!(
                    &p.loss_mask[at..at + s.len()],
                    &build_loss_mask(s, i).unwrap()[..]
                );
                at += s.len();
            }
            assert_eq!(max_len - at, p.pad_count);
            assert!(p.tokens[at..].iter().all(|&t| t == PAD));
            assert!(p.segments[at..].iter().all(|&g| g == PAD_SEGMENT));
            assert!(p.loss_mask[at..].iter().all(|&m| !m));
            non_pad += p.used();
        }
        assert!(
            seen.iter().all(|&c| c == 1),
            "seed {seed}: split or lost sample"
        );
        assert_eq!(non_pad, samples.iter().map(SftSample::len).sum::<usize>());

        // replay first-fit: no earlier pack had room when a sample was placed
        let where_: Vec<usize> = (0..n)
            .map(|i| {
                packs
                    .iter()
                    .position(|p| p.sample_ids.contains(&i))
                    .unwrap()
            })
            .collect();
        let mut free = vec![max_len; packs.len()];
        for i in 0..n {
            let len = samples[i].len();
            assert!(
                free[..where_[i]].iter().all(|&f| f < len),
                "seed {seed}: sample {i} not first fit"
            );
            free[where_[i]] -= len;
        }
    }
}

/// All ways to fill a 16-slot row with samples of length >= 2 followed by
/// padding.
fn layouts(rem: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    out.push(prefix.clone());
    for len in 2..=rem {
        prefix.push(len);
        layouts(rem - len, prefix, out);
        prefix.pop();
    }
}

#[test]
fn attention_mask_exhaustive_at_16() {
    const L: usize = 16;
    let mut all = Vec::new();
    layouts(L, &mut vec![], &mut all);
    let mut checked = 0;
    for lens in all.iter().filter(|l| !l.is_empty()) {
        let samples: Vec<_> = lens
            .iter()
            .map(|&n| SftSample::new(vec![EOT; n - 2], vec![1], Domain::General))
            .collect();
        let packs = pack_samples(&samples, L).unwrap();
        assert_eq!(packs.len(), 1);
        let mask = build_attention_mask(&packs[0]);
        // owner of each position computed from the layout alone
        let mut owner = vec![None; L];
        let mut at = 0;
        for (k, &n) in lens.iter().enumerate() {
            owner[at..at + n].fill(Some(k));
            at += n;
        }
        for i in 0..L {
            for j in 0..L {
                let want = j <= i && owner[i].is_some() && owner[i] == owner[j];
                assert_eq!(mask[i * L + j], want, "layout {lens:?} ({i},{j})");
            }
        }
        checked += 1;
    }
    assert!(checked > 500);
}

#[test]
fn later_turn_attends_earlier_turn() {
    let r = SftRecord {
        prompt: "ok?".into(),
        answer: "yes".into(),
        domain: Domain::General,
        turns: vec!["hi".into()],
    };
    let s = encode(&r);
    let packs = pack_samples(std::slice::from_ref(&s), 16).unwrap();
    let mask = build_attention_mask(&packs[0]);
    let eot = s.turn_boundaries[0];
    let (q, k) = (eot + 1, 1);
    assert!(mask[q * 16 + k]);
    // single sample, no pads inside its span: lower triangular there
    for i in 0..s.len() {
        for j in 0..s.len() {
            assert_eq!(mask[i * 16 + j], j <= i);
        }
    }
}

fn tiny_model(seed: u64) -> MoeModel {
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
    MoeModel::init(cfg, seed).unwrap()
}

fn corpus(seed: u64, n: usize) -> Vec<SftSample> {
    let mut rng = Prng::new(seed);
    (0..n)
        .map(|i| {
            let fam = if i % 2 == 0 {
                TemplateFamily::ProductQa
            } else {
                TemplateFamily::GeneralChat
            };
            let t = render_template(fam, &mut rng);
            let r: SftRecord = serde_json::from_value(serde_json::to_value(&t).unwrap()).unwrap();
            let mut s = encode(&r);
            s.prompt.truncate(12);
            s.answer.truncate(12);
            s
        })
        .collect()
}

#[test]
fn masked_loss_equals_extracted_positions() {
    let model = tiny_model(3);
    let packs = pack_samples(&corpus(5, 6), 32).unwrap();
    let batch = packs_to_batch(&packs);
    let out = model.lm_forward(&batch).unwrap();
    let v = model.cfg.vocab_size;
    let logits = out.logits.data();
    let mut total = 0.0f64;
    let mut count = 0;
    for p in 0..batch.len() {
        if !batch.loss_mask[p] {
            continue;
        }
        let row: Vec<f64> = logits[p * v..(p + 1) * v]
            .iter()
            .map(|&z| z as f64)
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[batch.targets[p] as usize];
        count += 1;
    }
    let expected = total / count as f64;
    assert!(
        (out.l_lm - expected).abs() < 1e-5,
        "{} vs {expected}",
        out.l_lm
    );
    assert_eq!(
        count,
        packs.iter().map(|p| ones(&p.loss_mask)).sum::<usize>()
    );
}

#[test]
fn pad_and_unmasked_logits_get_zero_gradient() {
    let model = tiny_model(4);
    let packs = pack_samples(&corpus(6, 5), 32).unwrap();
    assert!(packs.iter().any(|p| p.pad_count > 0));
    let batch = packs_to_batch(&packs);
    let mut sess = Session::train(&model.params);
    let fwd = model.forward(&mut sess, &batch, &mut NoHook).unwrap();
    sess.tape.retain_grad(fwd.logits);
    sess.backward(fwd.lm_loss).unwrap();
    let g = sess.tape.grad(fwd.logits).unwrap();
    let v = model.cfg.vocab_size;
    for p in 0..batch.len() {
        let row = &g[p * v..(p + 1) * v];
        if batch.loss_mask[p] {
            assert!(row.iter().any(|&x| x != 0.0));
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "position {p} leaks gradient");
        }
    }
}

#[test]
fn all_zero_mask_is_rejected() {
    let model = tiny_model(1);
    let mut packs = pack_samples(&corpus(2, 2), 32).unwrap();
    for p in &mut packs {
        p.loss_mask.fill(false);
    }
    let e = sft_loss(&model, &packs).unwrap_err();
    assert!(matches!(e, SftError::Model(MoeError::EmptyLossMask)));
}

#[test]
fn chunked_loss_matches_one_forward() {
    let model = tiny_model(4);
    let packs = pack_samples(&corpus(5, 24), 32).unwrap();
    assert!(packs.len() > EVAL_PACKS);
    let whole = model.lm_forward(&packs_to_batch(&packs)).unwrap().l_lm;
    let chunked = sft_loss(&model, &packs).unwrap();
    assert!((whole - chunked).abs() < 1e-5, "{whole} vs {chunked}");
}

#[test]
fn sft_steps_reduce_loss() {
    let mut trainer = Trainer::new(
        tiny_model(9),
        AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
    );
    let packs = pack_samples(&corpus(8, 16), 32).unwrap();
    let before = sft_loss(&trainer.model, &packs).unwrap();
    for _ in 0..60 {
        sft_step(&mut trainer, &packs).unwrap();
    }
    let after = sft_loss(&trainer.model, &packs).unwrap();
    assert!(after < before - 0.5, "{before} -> {after}");
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.jsonl");
    let recs = vec![
        SftRecord {
            prompt: "Is the mug in stock?".into(),
            answer: "Yes.".into(),
            domain: Domain::Ecommerce,
            turns: vec![],
        },
        SftRecord {
            prompt: "and now?".into(),
            answer: "ok".into(),
            domain: Domain::General,
            turns: vec!["hello".into(), "hi".into()],
        },
    ];
    write_jsonl(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text
        .lines()
        .next()
        .unwrap()
        .contains(r#""domain":"ecommerce""#));
    assert_eq!(read_jsonl(&path).unwrap(), recs);
}
