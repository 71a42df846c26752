mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tumornet::augment::AugmentConfig;
use tumornet::data::{one_hot, Sample};
use tumornet::graph::{build_classifier, forward_to_endpoint, init_random, GraphSpec, TrainablePolicy, WeightStore};
use tumornet::train::{evaluate, fit, train_step, AdamConfig, AdamState, TrainConfig};
use tumornet::Tensor;

fn head_only_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 3,
        patience: 10,
        policy: TrainablePolicy::HeadOnly,
        input_size: 75,
        augmentation: AugmentConfig::identity(),
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn batch_of(samples: &[Sample]) -> (Tensor, Tensor) {
    let x = Tensor::stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>()).unwrap();
    let y = Tensor::stack(&samples.iter().map(|s| one_hot(s.label)).collect::<Vec<_>>()).unwrap();
    (x, y)
}

fn frozen_snapshot(g: &GraphSpec, w: &WeightStore, policy: TrainablePolicy) -> Vec<(String, Vec<u32>)> {
    g.layers()
        .iter()
        .flat_map(|l| l.weights.iter().map(move |s| (l, s)))
        .filter(|(l, s)| !policy.is_trainable(s, l.in_head()))
        .map(|(_, s)| (s.name.clone(), w.get(&s.name).unwrap().data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn one_step_leaves_frozen_weights_bit_identical() {
    let g = build_classifier(75, 0.5).unwrap();
    let samples = common::synthetic_samples(3, 75, 2);
    for policy in [TrainablePolicy::HeadOnly, TrainablePolicy::FullFinetune] {
        let mut w = init_random(&g, 1);
        w.apply_policy(&g, policy);
        let before = frozen_snapshot(&g, &w, policy);
        let kernel_before = w.get("dense_1/kernel").unwrap().as_ref().clone();
        let (x, y) = batch_of(&samples);
        let mut adam = AdamState::new(AdamConfig::default());
        train_step(&g, &mut w, &mut adam, 0, x, y, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(frozen_snapshot(&g, &w, policy), before, "{policy}");
        assert_ne!(w.get("dense_1/kernel").unwrap().as_ref(), &kernel_before);
        assert_eq!(adam.t, 1);
        if policy == TrainablePolicy::FullFinetune {
            assert!(adam.moments("conv_0/kernel").is_some());
        }
    }
}

#[test]
fn adam_steps_are_bounded_by_twice_lr() {
    let g = build_classifier(75, 0.5).unwrap();
    let mut w = init_random(&g, 3);
    w.apply_policy(&g, TrainablePolicy::HeadOnly);
    let (x, y) = batch_of(&common::synthetic_samples(3, 75, 3));
    let mut adam = AdamState::new(AdamConfig::default());
    let lr = 1e-3;
    for step in 0..3 {
        let before = w.get("dense_0/bias").unwrap().as_ref().clone();
        train_step(&g, &mut w, &mut adam, 0, x.clone(), y.clone(), lr, &mut ChaCha8Rng::seed_from_u64(step)).unwrap();
        let after = w.get("dense_0/bias").unwrap();
        let max = before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        assert!(max <= 2.0 * lr, "step {step}: {max}");
    }
}

#[test]
fn fixed_batch_loss_decreases_over_first_steps() {
    let g = build_classifier(75, 0.5).unwrap();
    let mut w = init_random(&g, 0);
    w.apply_policy(&g, TrainablePolicy::HeadOnly);
    let samples = common::synthetic_samples(6, 75, 4);
    let (x, y) = batch_of(&samples);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut last = evaluate(&g, &w, &samples, 8).unwrap().loss;
    for step in 0..5 {
        train_step(&g, &mut w, &mut adam, 0, x.clone(), y.clone(), 1e-3, &mut ChaCha8Rng::seed_from_u64(step)).unwrap();
        let loss = evaluate(&g, &w, &samples, 8).unwrap().loss;
        assert!(loss < last, "step {step}: {loss} >= {last}");
        last = loss;
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let g = build_classifier(75, 0.5).unwrap();
    let mut w = init_random(&g, 0);
    let original = w.clone();
    let s = common::synthetic_samples(3, 75, 1);
    let cfg = TrainConfig {
        max_epochs: 0,
        ..head_only_config()
    };
    let out = fit(&g, &mut w, &s, &s, &cfg, &mut |_| {}).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(w, original);
}

#[test]
fn evaluation_ignores_dropout_seed() {
    let g = build_classifier(75, 0.5).unwrap();
    let w = init_random(&g, 0);
    let s = common::synthetic_samples(5, 75, 1);
    let a = evaluate(&g, &w, &s, 2).unwrap();
    let b = evaluate(&g, &w, &s, 5).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert!((a.loss - b.loss).abs() < 1e-6);
}

#[test]
fn feature_path_matches_image_path() {
    let g = build_classifier(75, 0.5).unwrap();
    let (x, y) = batch_of(&common::synthetic_samples(4, 75, 9));
    let feats = forward_to_endpoint(&g, &init_random(&g, 5), &x, "mixed8").unwrap();
    let from = g.endpoint("mixed8").unwrap();
    let mut losses = Vec::new();
    let mut stores = Vec::new();
    for (start, input) in [(0, x), (from, feats)] {
        let mut w = init_random(&g, 5);
        w.apply_policy(&g, TrainablePolicy::HeadOnly);
        let mut adam = AdamState::new(AdamConfig::default());
        let loss = train_step(&g, &mut w, &mut adam, start, input, y.clone(), 1e-3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        losses.push(loss);
        stores.push(w);
    }
    assert_eq!(losses[0].to_bits(), losses[1].to_bits());
    assert_eq!(stores[0], stores[1]);
}

#[test]
fn cached_fit_is_repeatable() {
    let g = build_classifier(75, 0.5).unwrap();
    let s = common::synthetic_samples(7, 75, 9);
    let cfg = head_only_config();
    let mut wa = init_random(&g, 5);
    let a = fit(&g, &mut wa, &s, &s, &cfg, &mut |_| {}).unwrap();
    assert!(a.feature_cache);
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.steps, 6);
    let mut wb = init_random(&g, 5);
    let b = fit(&g, &mut wb, &s, &s, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(wa, wb);
}

#[test]
fn prefetch_and_deterministic_modes_match() {
    let g = build_classifier(75, 0.5).unwrap();
    let s = common::synthetic_samples(6, 75, 5);
    let base = TrainConfig {
        max_epochs: 2,
        augmentation: AugmentConfig::default(),
        ..head_only_config()
    };
    let run = |deterministic: bool| {
        let mut w = init_random(&g, 2);
        let cfg = TrainConfig {
            deterministic,
            ..base.clone()
        };
        let out = fit(&g, &mut w, &s, &s[..3], &cfg, &mut |_| {}).unwrap();
        assert!(!out.feature_cache);
        (out.history, w)
    };
    let (ha, wa) = run(true);
    let (hb, wb) = run(false);
    assert_eq!(ha, hb);
    assert_eq!(wa, wb);
}

#[test]
fn history_is_bounded_and_metrics_in_range() {
    let g = build_classifier(75, 0.5).unwrap();
    let mut w = init_random(&g, 2);
    let s = common::synthetic_samples(6, 75, 8);
    let cfg = TrainConfig {
        max_epochs: 4,
        patience: 1,
        ..head_only_config()
    };
    let out = fit(&g, &mut w, &s, &s, &cfg, &mut |_| {}).unwrap();
    assert!(!out.history.is_empty() && out.history.len() <= 4);
    for r in &out.history {
        for v in [r.train_accuracy, r.val_accuracy, r.train_precision, r.val_precision, r.train_recall, r.val_recall] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.train_loss >= 0.0 && r.val_loss >= 0.0);
    }
}

#[test]
fn fit_rejects_empty_validation() {
    let g = build_classifier(75, 0.5).unwrap();
    let mut w = init_random(&g, 2);
    let s = common::synthetic_samples(3, 75, 8);
    assert!(fit(&g, &mut w, &s, &[], &head_only_config(), &mut |_| {}).is_err());
}
