use proptest::prelude::*;

use super::*;
use crate::autodiff::Tape;
use crate::dataset::make_synthetic;
use crate::encoder::Variant;
use crate::error::Error;
use crate::model::{age_head, predict, HeadParams, LabelScale, ModelConfig, ModelParams};
use crate::params::{bind, flatten, named};
use crate::patch_graph::ImageSample;
use crate::rng::uniform_tensor;
use crate::tensor::Tensor;

/// A model small enough for fast unit tests: 16×16 images, 4×4 patches.
pub(crate) fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        feature_dim: 6,
        k: 4,
        anchor_hidden: 6,
        ..ModelConfig::default()
    };
    cfg.model.stem.channels = 4;
    cfg.model.stem.kernel2 = 2;
    cfg.model.encoder.hidden_dim = 5;
    cfg.model.encoder.out_dim = 5;
    cfg.loss.neighbor_samples = 3;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg
}

fn samples(count: usize, seed: u64) -> Vec<ImageSample> {
    make_synthetic(count, 16, 16, seed).unwrap().samples()
}

fn head_output(h: &Tensor, head: &HeadParams) -> f64 {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let bound = bind(&mut tape, head);
    let y = age_head(&mut tape, hv, &bound).unwrap();
    tape.value(y).item().unwrap()
}

#[test]
fn constant_head_returns_bias() {
    let head = HeadParams {
        weight: Tensor::zeros(&[4, 1]),
        bias: Tensor::vector(vec![2.5]),
    };
    assert_eq!(head_output(&uniform_tensor(&[6, 4], -1.0, 1.0, 1), &head), 2.5);
}

#[test]
fn head_is_linear_in_embeddings() {
    let head = HeadParams {
        weight: uniform_tensor(&[4, 1], -1.0, 1.0, 2),
        bias: Tensor::vector(vec![0.7]),
    };
    let h = uniform_tensor(&[6, 4], -1.0, 1.0, 3);
    let doubled = Tensor::new(vec![6, 4], h.values().iter().map(|v| 2.0 * v).collect()).unwrap();
    let (a, b) = (head_output(&h, &head) - 0.7, head_output(&doubled, &head) - 0.7);
    assert!((b - 2.0 * a).abs() < 1e-12);
}

#[test]
fn head_matches_pool_then_dot() {
    let head = HeadParams {
        weight: uniform_tensor(&[5, 1], -1.0, 1.0, 4),
        bias: Tensor::vector(vec![-0.3]),
    };
    let h = uniform_tensor(&[7, 5], -1.0, 1.0, 5);
    let mut want = -0.3;
    for c in 0..5 {
        let pooled = (0..7).map(|i| h.get2(i, c)).sum::<f64>() / 7.0;
        want += pooled * head.weight.values()[c];
    }
    assert!((head_output(&h, &head) - want).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_is_a_null_step() {
    let mut cfg = tiny_config();
    cfg.learning_rate = 0.0;
    let data = samples(3, 6);
    let mut trainer = Trainer::new(&cfg, LabelScale::fit(&[10.0, 20.0])).unwrap();
    let before = trainer.params.clone();
    let batch: Vec<&ImageSample> = data.iter().collect();
    trainer.train_step(&batch, 1).unwrap();
    let bits = |p: &ModelParams| -> Vec<u64> {
        flatten(p).iter().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&trainer.params), bits(&before));
    assert_eq!(trainer.optimizer.step, 1);
}

#[test]
fn zero_objective_has_zero_gradient() {
    let mut cfg = tiny_config();
    cfg.age_loss_weight = 0.0;
    cfg.loss.w1 = 0.0;
    cfg.loss.w2 = 0.0;
    cfg.loss.w3 = 0.0;
    let trainer = Trainer::new(&cfg, LabelScale::default()).unwrap();
    let (report, grads) = trainer.loss_and_gradients(&samples(1, 7)[0], 3).unwrap();
    assert_eq!(report.total, 0.0);
    assert!(grads.iter().flatten().all(|&g| g == 0.0));
}

/// Gradient tensors by parameter name.
fn named_grads(trainer: &Trainer, img: &ImageSample) -> Vec<(String, Vec<f64>)> {
    let (_, grads) = trainer.loss_and_gradients(img, 5).unwrap();
    named(&trainer.params).into_iter().map(|(n, _)| n).zip(grads).collect()
}

fn all_zero(grads: &[(String, Vec<f64>)], prefix: &str) -> bool {
    grads
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .all(|(_, g)| g.iter().all(|&v| v == 0.0))
}

#[test]
fn head_gradient_vanishes_without_age_term() {
    let mut cfg = tiny_config();
    cfg.age_loss_weight = 0.0;
    let trainer = Trainer::new(&cfg, LabelScale::default()).unwrap();
    let grads = named_grads(&trainer, &samples(1, 8)[0]);
    assert!(all_zero(&grads, "head."));
    assert!(!all_zero(&grads, "encoder."));
}

#[test]
fn supervised_only_gradient_skips_anchor_path() {
    let mut cfg = tiny_config();
    cfg.loss.w1 = 0.0;
    cfg.loss.w2 = 0.0;
    cfg.loss.w3 = 0.0;
    let trainer = Trainer::new(&cfg, LabelScale::fit(&[10.0, 30.0])).unwrap();
    let grads = named_grads(&trainer, &samples(1, 9)[0]);
    assert!(all_zero(&grads, "anchor."));
    assert!(!all_zero(&grads, "head."));
    assert!(!all_zero(&grads, "encoder."));
}

#[test]
fn missing_label_is_data_error() {
    let cfg = tiny_config();
    let trainer = Trainer::new(&cfg, LabelScale::default()).unwrap();
    let mut img = samples(1, 10).remove(0);
    img.age = None;
    assert!(matches!(trainer.loss_and_gradients(&img, 0), Err(Error::Data(_))));
}

#[test]
fn single_image_overfits() {
    let mut cfg = tiny_config();
    cfg.learning_rate = 1e-3;
    cfg.dropout = 0.0;
    let img = samples(1, 11).remove(0);
    let mut trainer = Trainer::new(&cfg, LabelScale::fit(&[img.age.unwrap()])).unwrap();
    // the same step seed every step fixes the mask, shuffles and samples
    let losses: Vec<f64> = (0..200)
        .map(|_| trainer.train_step(&[&img], 42).unwrap().total)
        .collect();
    for t in 0..150 {
        assert!(losses[t + 50] < losses[t], "step {t}: {} vs {}", losses[t], losses[t + 50]);
    }
}

#[test]
fn weight_decay_shrinks_idle_parameters() {
    let cfg = TrainConfig {
        learning_rate: 0.1,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    for kind in [OptimizerKind::AdamW, OptimizerKind::Sgd] {
        let mut opt = Optimizer::new(&TrainConfig {
            optimizer: kind,
            ..cfg.clone()
        });
        let mut p = uniform_tensor(&[3, 3], -1.0, 1.0, 12);
        let before = p.norm();
        opt.update(&mut [&mut p], &[vec![0.0; 9]]).unwrap();
        assert!(p.norm() < before);
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let cfg = TrainConfig {
        learning_rate: 0.01,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(&cfg);
    let mut p = Tensor::vector(vec![1.0, -1.0]);
    opt.update(&mut [&mut p], &[vec![3.0, -0.5]]).unwrap();
    assert!((p.values()[0] - 0.99).abs() < 1e-9);
    assert!((p.values()[1] + 0.99).abs() < 1e-9);
}

#[test]
fn metrics_arithmetic() {
    let m = Metrics::from_errors(vec![1.0, -2.0, 6.0, 4.0], false).unwrap();
    assert_eq!(m.mae, 3.25);
    assert_eq!(m.cs_at(5), 0.75);
    assert_eq!(m.cs_at(4), 0.75);
    let strict = Metrics::from_errors(vec![1.0, -2.0, 6.0, 4.0], true).unwrap();
    assert_eq!(strict.cs_at(4), 0.5);
    let perfect = Metrics::from_errors(vec![0.0; 5], false).unwrap();
    assert_eq!(perfect.mae, 0.0);
    assert!(perfect.cs.values().all(|&c| c == 1.0));
    assert!(matches!(Metrics::from_errors(vec![], false), Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn cumulative_score_is_monotone(errors in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let m = Metrics::from_errors(errors.clone(), false).unwrap();
        let cs: Vec<f64> = m.cs.values().copied().collect();
        prop_assert!(cs.windows(2).all(|w| w[0] <= w[1]));
        let worst = errors.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        prop_assert_eq!(cumulative_score(&errors, worst, false), 1.0);
        let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
        prop_assert!((m.mae - mae).abs() < 1e-12);
    }
}

#[test]
fn evaluate_matches_scalar_loop() {
    let cfg = tiny_config();
    let data = samples(20, 13);
    let params = ModelParams::init(&cfg.model, 14);
    let scale = LabelScale::fit(&[20.0, 40.0, 60.0]);
    let m = evaluate(&data, &cfg.model, &params, scale, false).unwrap();
    let errors: Vec<f64> = data
        .iter()
        .map(|s| predict(&cfg.model, &params, scale, s).unwrap() - s.age.unwrap())
        .collect();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / 20.0;
    assert_eq!(m.mae, mae);
    for l in 0..=10u32 {
        let hits = errors.iter().filter(|e| e.abs() <= f64::from(l)).count();
        assert_eq!(m.cs_at(l), hits as f64 / 20.0);
    }
    assert!(matches!(evaluate(&[], &cfg.model, &params, scale, false), Err(Error::Usage(_))));
}

#[test]
fn one_epoch_one_batch_is_one_step() {
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    cfg.batch_size = 8;
    let data = samples(8, 15);
    let out = run_training(&data, &samples(3, 16), &cfg, |_| {}).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.best.epoch, 1);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config();
    let (train, val) = (samples(10, 17), samples(4, 18));
    let a = run_training(&train, &val, &cfg, |_| {}).unwrap();
    let b = run_training(&train, &val, &cfg, |_| {}).unwrap();
    assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
    assert_eq!(a.best.to_json(), b.best.to_json());
    assert_eq!(a.log.len(), 2);
}

#[test]
fn small_datasets_use_small_batches() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.effective_batch(500), 32);
    assert_eq!(cfg.effective_batch(5000), 196);
    let fixed = TrainConfig {
        shrink_small_batches: false,
        ..TrainConfig::default()
    };
    assert_eq!(fixed.effective_batch(500), 196);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = tiny_config();
    let data = samples(5, 19);
    let params = ModelParams::init(&cfg.model, 20);
    let scale = LabelScale::fit(&[12.0, 44.0]);
    let ckpt = Checkpoint::new(&cfg, 3, 7, scale, &params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let restored = loaded.params().unwrap();
    for s in &data {
        let a = predict(&cfg.model, &params, scale, s).unwrap();
        let b = predict(&loaded.config.model, &restored, loaded.label_scale, s).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn checkpoint_version_and_config_mismatch() {
    let cfg = tiny_config();
    let ckpt = Checkpoint::new(&cfg, 1, 1, LabelScale::default(), &ModelParams::init(&cfg.model, 0));
    let text = ckpt.to_json().replacen("\"version\":1", "\"version\":99", 1);
    let err = Checkpoint::from_json(&text).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("version 99"));

    let mut other = cfg.clone();
    other.model.encoder.variant = Variant::Gin;
    assert!(matches!(ckpt.check_compatible(&other), Err(Error::Config(_))));
    assert!(ckpt.check_compatible(&cfg).is_ok());

    let mut wrong = ckpt.clone();
    wrong.config.model.feature_dim = 9;
    assert!(matches!(wrong.params(), Err(Error::Config(_))));
}

#[test]
fn config_toml_round_trip_and_overrides() {
    let cfg = TrainConfig::default();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(TrainConfig::from_toml("").unwrap(), cfg);
    assert!(matches!(TrainConfig::from_toml("epochz = 3"), Err(Error::Config(_))));
    assert!(TrainConfig::from_toml("[loss]\ngamma = 1.0").is_err());

    let mut c = cfg.clone();
    c.apply_override("epochs=3").unwrap();
    c.apply_override("loss.alpha=1").unwrap();
    c.apply_override("model.encoder.variant=gin").unwrap();
    c.apply_override("optimizer=\"sgd\"").unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.loss.alpha, 1.0);
    assert_eq!(c.model.encoder.variant, Variant::Gin);
    assert_eq!(c.optimizer, OptimizerKind::Sgd);
    assert!(matches!(c.apply_override("nope=1"), Err(Error::Config(_))));
    assert!(matches!(c.apply_override("loss.alpha=abc"), Err(Error::Config(_))));
    assert!(c.apply_override("epochs").is_err());
}

#[test]
fn config_validation() {
    let bad = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = TrainConfig::default();
        f(&mut c);
        matches!(c.validate(), Err(Error::Config(_)))
    };
    assert!(TrainConfig::default().validate().is_ok());
    assert!(bad(&|c| c.epochs = 0));
    assert!(bad(&|c| c.batch_size = 0));
    assert!(bad(&|c| c.learning_rate = -1.0));
    assert!(bad(&|c| c.mask_rate = 1.5));
    assert!(bad(&|c| c.dropout = 1.0));
    assert!(bad(&|c| c.model.k = 64));
    assert!(bad(&|c| c.model.patch_size = 7));
    assert!(bad(&|c| c.loss.neighbor_samples = 10));
}
