mod common;

use dialect_frontend::autodiff::Tensor;
use dialect_frontend::model::checkpoint::to_bytes;
use dialect_frontend::model::ModelKind;
use dialect_frontend::training::*;
use dialect_frontend::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

#[test]
fn sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = [5, 6, 7, 8, 9, 10];
    assert_eq!(count(&sample_glancing_positions(&r, &r, 1.0, &mut rng).unwrap()), 0);
    let four_wrong = [5, 6, 1, 1, 1, 1];
    assert_eq!(
        count(&sample_glancing_positions(&four_wrong, &r, 0.5, &mut rng).unwrap()),
        2
    );
    let all_wrong = [1; 6];
    assert_eq!(
        sample_glancing_positions(&all_wrong, &r, 1.0, &mut rng).unwrap(),
        vec![true; 6]
    );
    assert!(matches!(
        sample_glancing_positions(&r[..5], &r, 0.5, &mut rng),
        Err(Error::Dimension(_))
    ));
    assert!(sample_glancing_positions(&r, &r, 1.5, &mut rng).is_err());
}

#[test]
fn sampling_covers_all_positions_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = [5u32; 4];
    let p = [6, 5, 5, 5];
    let mut hits = [0usize; 4];
    for _ in 0..4000 {
        for (i, m) in sample_glancing_positions(&p, &r, 1.0, &mut rng)
            .unwrap()
            .iter()
            .enumerate()
        {
            hits[i] += usize::from(*m);
        }
    }
    for h in hits {
        assert!((800..1200).contains(&h), "{hits:?}");
    }
}

#[test]
fn error_weighted_sampling_picks_wrong_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = [5u32, 6, 7, 8];
    let p = [5u32, 1, 7, 1];
    for _ in 0..100 {
        let m = sample_positions(&p, &r, 0.5, SamplingMode::ErrorWeighted, &mut rng).unwrap();
        assert_eq!(count(&m), 1);
        assert!(m[1] || m[3]);
    }
}

#[test]
fn schedule_is_linear_and_clamped() {
    let s = GlancingSchedule::new(0.5, 0.3, 10).unwrap();
    assert_eq!(s.lambda(0), 0.5);
    assert!((s.lambda(5) - 0.4).abs() < 1e-12);
    assert!((s.lambda(10) - 0.3).abs() < 1e-12);
    assert_eq!(s.lambda(1000), s.lambda(10));
    let mut prev = f64::INFINITY;
    for step in 0..20 {
        assert!(s.lambda(step) <= prev && s.lambda(step) >= 0.3);
        prev = s.lambda(step);
    }
    assert!(GlancingSchedule::new(0.2, 0.4, 10).is_err());
    assert!(GlancingSchedule::new(1.2, 0.4, 10).is_err());
}

#[test]
fn empty_mask_trains_every_position() {
    let t = common::tiny(6, 1);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 1);
    let ex = &common::examples(&m, &t)[0];
    let g = token_loss_logit_grad(&m, ex, &vec![false; ex.tgt.len()])
        .unwrap()
        .unwrap();
    for row in 0..ex.tgt.len() {
        assert!(g.row(row).iter().any(|&v| v != 0.0));
    }
}

#[test]
fn full_mask_skips_token_loss() {
    let t = common::tiny(6, 1);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 1);
    let ex = common::examples(&m, &t);
    let masks: Vec<Vec<bool>> = ex.iter().map(|e| vec![true; e.tgt.len()]).collect();
    let w = LossWeights::default();
    let r = batch_gradients(&m, &ex, &masks, &w, false).unwrap();
    assert_eq!(r.losses.token, 0.0);
    let expect = w.length * r.losses.length + w.alignment * r.losses.alignment;
    assert!((r.losses.total - expect).abs() < 1e-12);
    assert!(token_loss_logit_grad(&m, &ex[0], &masks[0]).unwrap().is_none());
}

#[test]
fn sampled_positions_get_no_token_gradient() {
    let t = common::tiny(20, 4);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for ex in common::examples(&m, &t) {
        let enc = m.encode(&ex.src).unwrap();
        let pred = first_pass(&m, &enc, ex.tgt.len()).unwrap();
        let mask = sample_glancing_positions(&pred, &ex.tgt, 0.7, &mut rng).unwrap();
        if let Some(g) = token_loss_logit_grad(&m, &ex, &mask).unwrap() {
            for (i, &s) in mask.iter().enumerate() {
                assert_eq!(s, g.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn gradients_do_not_depend_on_first_pass_beyond_the_mask() {
    let t = common::tiny(12, 5);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let ex = common::examples(&m, &t);
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let step = glancing_step(&m, &ex, 0.6, &w, SamplingMode::Uniform, false, &mut rng).unwrap();
    let fixed = batch_gradients(&m, &ex, &step.glance_masks, &w, false).unwrap();
    assert_eq!(step.grads, fixed.grads);
    assert_eq!(step.losses, fixed.losses);
}

#[test]
fn zero_alignment_weight_ignores_alignment_targets() {
    let t = common::tiny(8, 6);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let with = common::examples(&m, &t);
    let without: Vec<Example> = with.iter().cloned().map(|e| Example { alignment: None, ..e }).collect();
    let masks: Vec<Vec<bool>> = with.iter().map(|e| vec![false; e.tgt.len()]).collect();
    let w = LossWeights {
        alignment: 0.0,
        ..LossWeights::default()
    };
    let a = batch_gradients(&m, &with, &masks, &w, false).unwrap();
    let b = batch_gradients(&m, &without, &masks, &w, false).unwrap();
    assert_eq!(a.grads, b.grads);

    let w = LossWeights::default();
    assert!(matches!(
        batch_gradients(&m, &without, &masks, &w, false),
        Err(Error::Config(_))
    ));
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(m, &without, &[], &[], &cfg, |_| {}),
        Err(Error::Config(_))
    ));
}

#[test]
fn alignment_loss_matches_hand_mse() {
    let t = common::tiny(1, 7);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let ex = common::examples(&m, &t);
    let e = &ex[0];
    let mask = vec![vec![false; e.tgt.len()]];
    let w = LossWeights::default();
    let r = batch_gradients(&m, &ex, &mask, &w, false).unwrap();
    let att = m
        .decode_nat(&m.encode(&e.src).unwrap(), Some(e.tgt.len()))
        .unwrap()
        .cross_attention;
    let target: Tensor = e.alignment.as_ref().unwrap().to_tensor();
    let mse: f64 = att
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / att.len() as f64;
    assert!(
        (r.losses.alignment - mse).abs() < 1e-12,
        "{} vs {mse}",
        r.losses.alignment
    );
}

#[test]
fn zero_epochs_returns_initialization() {
    let t = common::tiny(8, 8);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let ex = common::examples(&m, &t);
    let before = to_bytes(&m);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (after, report) = train(m, &ex, &[], &ex, &cfg, |_| {}).unwrap();
    assert_eq!(to_bytes(&after), before);
    assert!(report.epochs.is_empty());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let t = common::tiny(24, 9);
    let run = |seed: u64| {
        let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
        let ex = common::examples(&m, &t);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            seed,
            ..TrainConfig::default()
        };
        to_bytes(&train(m, &ex, &[], &ex[..4], &cfg, |_| {}).unwrap().0)
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn report_has_one_record_per_epoch() {
    let t = common::tiny(10, 10);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let ex = common::examples(&m, &t);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let (_, report) = train(m, &ex, &[], &ex, &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    let steps: Vec<usize> = report.epochs.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![3, 6, 9]);
    let best = report
        .epochs
        .iter()
        .map(|r| r.valid_bleu)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.epochs[report.best_epoch - 1].valid_bleu, best);
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().count(), 4);
    assert_eq!(tsv.lines().next().unwrap(), TrainReport::TSV_HEADER);
}

#[test]
fn divergence_returns_last_finite_model() {
    let t = common::tiny(8, 11);
    let m = common::tiny_model(ModelKind::Nat, &t.pairs, 16, 2);
    let ex = common::examples(&m, &t);
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e305,
        clip_norm: 0.0,
        ..TrainConfig::default()
    };
    match train(m, &ex, &[], &[], &cfg, |_| {}) {
        Err(Error::Diverged { last_finite, .. }) => assert!(last_finite.params.all_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn config_kv_round_trip() {
    let mut cfg = TrainConfig {
        epochs: 7,
        learning_rate: 0.003,
        seed: 42,
        ..TrainConfig::default()
    };
    cfg.weights.alignment = 0.25;
    cfg.sampling = SamplingMode::ErrorWeighted;
    let mut back = TrainConfig::default();
    back.apply_kv(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    let mut bad = cfg.to_kv();
    bad.insert("epochs".into(), "many".into());
    assert!(TrainConfig::default().apply_kv(&bad).is_err());
}

#[test]
fn overfit_nat_reproduces_training_targets() {
    let t = common::tiny(30, 12);
    let m = common::overfit(ModelKind::Nat, &t, 120);
    let ex = common::examples(&m, &t);
    let exact = ex
        .iter()
        .filter(|e| m.translate_sentence(&e.src).unwrap() == e.tgt)
        .count();
    assert!(exact >= 28, "{exact}/{} exact", ex.len());
}
