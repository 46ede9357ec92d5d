mod common;

use common::*;
use nalgebra::DMatrix;
use whitenet::config::{ExperimentConfig, SyntheticConfig};
use whitenet::dataset::{generate, ImbalanceSpec};
use whitenet::experiment::{load_data, run_on_data, Variant};
use whitenet::nn::{cross_entropy, Model, ModelConfig, Sgd};
use whitenet::sampler::{GrbsSampler, RandomSampler};
use whitenet::train::*;
use whitenet::Error;

fn small_config(seed: u64, variant: Variant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(SyntheticConfig {
        num_classes: 4,
        n_max: 200,
        gamma: 10.0,
        feature_dim: 8,
        class_distance: 3.0,
        test_per_class: 50,
        seed: None,
    });
    cfg.seed = seed;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.model.hidden = vec![16];
    cfg.model.feature_dim = 8;
    cfg.probe_size = 64;
    cfg.grbs.r0 = 0.1;
    cfg.bet.interval = 5;
    variant.apply(&mut cfg);
    cfg
}

fn small_data() -> whitenet::dataset::LongTailedData {
    generate(&ImbalanceSpec {
        num_classes: 4,
        n_max: 100,
        gamma: 5.0,
        feature_dim: 6,
        class_distance: 3.0,
        test_per_class: 10,
        seed: 3,
    })
    .unwrap()
}

fn small_model(whitening: bool) -> Model {
    let mut cfg = ModelConfig {
        hidden: vec![8],
        feature_dim: 4,
        ..Default::default()
    };
    cfg.whitening.enabled = whitening;
    Model::new(6, 4, &cfg, 11).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data();
    let mut model = small_model(true);
    let before: Vec<DMatrix<f64>> = model.params().into_iter().cloned().collect();
    let mut opt = Sgd::new(&model, 0.9, 2e-4);
    let (x, y) = data.train.gather(&(0..32).collect::<Vec<_>>());
    let out = train_step(&mut model, &mut opt, &x, &y, 0.0).unwrap();
    assert!(out.loss.is_finite() && out.e > 0.0);
    let after: Vec<DMatrix<f64>> = model.params().into_iter().cloned().collect();
    assert_eq!(before, after);
    assert_eq!(model.whitening.as_ref().unwrap().updates, 1);
}

#[test]
fn repeated_steps_on_one_batch_reduce_loss() {
    let data = small_data();
    for whitening in [false, true] {
        let mut model = small_model(whitening);
        let mut opt = Sgd::new(&model, 0.9, 0.0);
        let (x, y) = data.train.gather(&(0..64).map(|i| i * 3).collect::<Vec<_>>());
        let first = train_step(&mut model, &mut opt, &x, &y, 0.05).unwrap().loss;
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut model, &mut opt, &x, &y, 0.05).unwrap().loss;
        }
        assert!(last < 0.5 * first, "whitening={whitening}: {first} -> {last}");
    }
}

#[test]
fn composite_gradient_matches_finite_differences() {
    for seed in 0..5 {
        for whitening in [false, true] {
            let err = composite_gradient_error(seed, whitening);
            assert!(err < 1e-3, "seed {seed} whitening={whitening}: {err}");
        }
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let logits = gaussian(&mut r, 5, 7);
    let labels = [0, 4, 2, 2, 1, 3, 0];
    let to_mat = |v: &[f64]| DMatrix::from_row_slice(5, 7, v);
    let flat = flatten(&logits);
    let (_, grad) = cross_entropy(&to_mat(&flat), &labels);
    let numeric = central_diff(|v| cross_entropy(&to_mat(v), &labels).0, &flat, 1e-5);
    let analytic: Vec<f64> = grad.transpose().iter().copied().collect();
    assert!(max_rel_error(&analytic, &numeric, 1e-6) < 1e-6);
}

#[test]
fn bet_schedule_runs_exact_step_count() {
    let data = small_data();
    let plan = {
        let cfg = small_config(0, Variant::WhiteningGrbsBet);
        whitenet::experiment::build_plan(&cfg, &data.train).unwrap()
    };
    let mut model = small_model(true);
    let mut random = RandomSampler::new(data.train.len(), 32, 1).unwrap();
    let mut grbs = GrbsSampler::new(&plan, &data.train.labels, 2).unwrap();
    let schedule = BetSchedule::new(60, 120, 10).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        ..Default::default()
    };
    let out = run_bet(
        &mut model,
        &data.train,
        &mut random,
        Some(&mut grbs),
        &schedule,
        &cfg,
        RunOptions {
            iters_per_epoch: 7,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.steps.len(), 140);
    assert_eq!(out.grbs_steps(), 20);
    // Injections follow random steps 60 and 120.
    let modes: Vec<StepMode> = out.steps.iter().map(|s| s.mode).collect();
    assert!(modes[60..70].iter().all(|&m| m == StepMode::Grbs));
    assert!(modes[130..].iter().all(|&m| m == StepMode::Grbs));
    assert_eq!(modes[59], StepMode::Random);
    // ⌈120 / 7⌉ epoch records.
    assert_eq!(out.records.len(), 18);
}

#[test]
fn interval_beyond_schedule_equals_plain_training() {
    let data = small_data();
    let plan = whitenet::experiment::build_plan(&small_config(0, Variant::WhiteningGrbsBet), &data.train).unwrap();
    let cfg = TrainConfig {
        lr: 0.02,
        ..Default::default()
    };
    let run = |with_grbs: bool| {
        let mut model = small_model(true);
        let mut random = RandomSampler::new(data.train.len(), 32, 4).unwrap();
        let mut grbs = GrbsSampler::new(&plan, &data.train.labels, 5).unwrap();
        let schedule = if with_grbs {
            BetSchedule::new(50, 40, 3).unwrap()
        } else {
            BetSchedule::plain(40)
        };
        let stream = with_grbs.then_some(&mut grbs as &mut BatchStream<'_>);
        let out = run_bet(
            &mut model,
            &data.train,
            &mut random,
            stream,
            &schedule,
            &cfg,
            RunOptions::default(),
        )
        .unwrap();
        (out.steps, model)
    };
    let (a, ma) = run(true);
    let (b, mb) = run(false);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn exhausted_stream_is_an_error() {
    let data = small_data();
    let mut model = small_model(false);
    let mut short = (0..5).map(|i| vec![i, i + 1, i + 2]);
    let err = run_bet(
        &mut model,
        &data.train,
        &mut short,
        None,
        &BetSchedule::plain(8),
        &TrainConfig::default(),
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(
        matches!(
            err,
            Error::StreamExhausted {
                completed: 5,
                expected: 8
            }
        ),
        "{err:?}"
    );
}

#[test]
fn many_class_grouped_schedule_runs() {
    let mut cfg = ExperimentConfig::synthetic(SyntheticConfig {
        num_classes: 100,
        n_max: 200,
        gamma: 100.0,
        feature_dim: 32,
        class_distance: 3.0,
        test_per_class: 5,
        seed: None,
    });
    cfg.train.epochs = 1;
    cfg.grbs.groups = 10;
    cfg.grbs.r0 = 0.01;
    cfg.grbs.alpha = 2.0;
    cfg.bet.interval = 30;
    Variant::WhiteningGrbsBet.apply(&mut cfg);
    let data = load_data(&cfg, std::path::Path::new(".")).unwrap();
    let result = run_on_data(&cfg, &data, None).unwrap();
    let plan = result.plan.unwrap();
    assert_eq!(plan.num_groups, 10);
    assert_eq!(plan.r_min, 0.01);
    let t1 = data.train.len() / 128;
    assert_eq!(result.run.steps.len(), t1 + (t1 / 30) * 10);
}

#[test]
fn constant_classifier_scores_one_over_n() {
    let data = small_data();
    let mut model = small_model(false);
    model.classifier.weight.fill(0.0);
    model.classifier.bias.fill(0.0);
    model.classifier.bias[(1, 0)] = 1.0;
    let m = evaluate(
        &model,
        &data.test,
        &data.train.class_counts(),
        &ShotThresholds::default(),
    )
    .unwrap();
    assert_eq!(m.overall, 0.25);
    assert_eq!(m.per_class, vec![Some(0.0), Some(1.0), Some(0.0), Some(0.0)]);
}

#[test]
fn perfect_predictions_score_one_on_every_split() {
    let labels: Vec<usize> = (0..3).flat_map(|k| [k; 4]).collect();
    let m = score(&labels, &labels, 3, &[500, 50, 5], &ShotThresholds::default()).unwrap();
    assert_eq!(
        (m.overall, m.many, m.medium, m.few),
        (1.0, Some(1.0), Some(1.0), Some(1.0))
    );
    let none = score(&labels, &labels, 3, &[500, 400, 300], &ShotThresholds::default()).unwrap();
    assert_eq!((none.medium, none.few), (None, None));
    let json = serde_json::to_value(&none).unwrap();
    assert!(json.get("few").is_none());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1, Variant::Whitening);
    let data = load_data(&cfg, std::path::Path::new(".")).unwrap();
    let result = run_on_data(&cfg, &data, None).unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&Checkpoint::new(result.model.clone(), "h".into(), None).unwrap(), &path).unwrap();
    let model = load_checkpoint(&path).unwrap().into_model_for(&cfg.model).unwrap();
    assert_eq!(model, result.model);
    let logits = |m: &Model| m.predict_logits(&data.test.features).unwrap();
    assert_eq!(logits(&model).as_slice(), logits(&result.model).as_slice());
    let metrics = evaluate(&model, &data.test, &result.train_counts, &cfg.evaluation).unwrap();
    assert_eq!(metrics, result.metrics);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&Checkpoint::new(small_model(true), "h".into(), None).unwrap(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["model"]["classifier"]["bias"][0][0] = serde_json::json!(123.0);
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("checksum")));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("version")));
}

#[test]
fn whitening_mismatch_is_rejected() {
    let plain = Checkpoint::new(small_model(false), "h".into(), None).unwrap();
    let mut cfg = ModelConfig {
        hidden: vec![8],
        feature_dim: 4,
        ..Default::default()
    };
    cfg.whitening.enabled = true;
    assert!(matches!(
        plain.clone().into_model_for(&cfg),
        Err(Error::ConfigMismatch(_))
    ));
    cfg.whitening.enabled = false;
    assert!(plain.into_model_for(&cfg).is_ok());
}

#[test]
fn identical_seeds_give_identical_runs() {
    for variant in Variant::ALL {
        let cfg = small_config(7, variant);
        let data = load_data(&cfg, std::path::Path::new(".")).unwrap();
        let a = run_on_data(&cfg, &data, None).unwrap();
        let b = run_on_data(&cfg, &data, None).unwrap();
        assert_eq!(a.run.steps, b.run.steps, "{}", variant.name());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }
}

#[test]
fn whitening_with_bet_ends_with_lower_training_loss_than_erm() {
    for seed in 0..3 {
        let erm_cfg = benchmark_config(seed, 100.0, Variant::Erm);
        let data = load_data(&erm_cfg, std::path::Path::new(".")).unwrap();
        let erm = run_on_data(&erm_cfg, &data, None).unwrap();
        let bet = run_on_data(&benchmark_config(seed, 100.0, Variant::WhiteningGrbsBet), &data, None).unwrap();
        let (l_erm, l_bet) = (erm.run.final_epoch_loss(), bet.run.final_epoch_loss());
        assert!(l_bet < l_erm, "seed {seed}: whitening+BET {l_bet:.4} vs ERM {l_erm:.4}");
    }
}
