use std::path::Path;

use conceptmix::classifier::{
    compare_strategies, evaluate, train_classifier, Classifier, ClassifierConfig, Phase, TrainingStrategy,
};
use conceptmix::dataset::{Manifest, Provenance};
use conceptmix::shapes::{generate_shapes, ShapesConfig};
use conceptmix::Error;

fn shapes(dir: &Path, count: usize, seed: u64) -> Manifest {
    let cfg = ShapesConfig {
        classes: vec!["circle".into(), "cross".into()],
        count_per_class: count,
        size: 16,
        seed,
    };
    generate_shapes(dir, &cfg).unwrap()
}

/// Real records plus a relabelled copy of other images posing as synthetic data.
fn with_synthetic(dir: &Path) -> Manifest {
    let mut m = shapes(&dir.join("real"), 4, 1);
    for mut r in shapes(&dir.join("syn"), 4, 2).records {
        r.provenance = Provenance::Synthetic;
        m.push(r).unwrap();
    }
    m
}

fn config(steps: usize) -> ClassifierConfig {
    ClassifierConfig {
        batch: 8,
        phase: Phase { steps, lr: 1e-2 },
        ..ClassifierConfig::default()
    }
}

#[test]
fn memorizes_a_tiny_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let train = shapes(dir.path(), 3, 1);
    let (model, log) = train_classifier(&train, &TrainingStrategy::Baseline, &config(300), 0).unwrap();
    assert_eq!(log.losses.len(), 300);
    let predicted = model.predict(&train.load_images(None).unwrap()).unwrap();
    let truth: Vec<usize> = train.records.iter().map(|r| train.class_index(&r.label).unwrap()).collect();
    assert_eq!(predicted, truth);
}

#[test]
fn two_phase_without_a_second_phase_is_combined_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = with_synthetic(dir.path());
    let cfg = config(20);
    let two = TrainingStrategy::TwoPhase {
        phase1: cfg.phase,
        phase2: Phase { steps: 0, lr: 1e-3 },
    };
    let (a, _) = train_classifier(&m, &two, &cfg, 3).unwrap();
    let (b, _) = train_classifier(&m, &TrainingStrategy::Combined, &cfg, 3).unwrap();
    assert_eq!(a.params, b.params);
    let (c, _) = train_classifier(&m, &TrainingStrategy::default_two_phase(&cfg), &cfg, 3).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn evaluation_rejects_leakage_and_counts_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let train = shapes(&dir.path().join("train"), 3, 1);
    let test = shapes(&dir.path().join("test"), 5, 2);
    let (model, _) = train_classifier(&train, &TrainingStrategy::Baseline, &config(10), 0).unwrap();
    assert!(matches!(evaluate(&model, &train, &train), Err(Error::Leakage(_))));
    assert!(matches!(
        compare_strategies(&train, &train, &[TrainingStrategy::Baseline], &config(1), &[0]),
        Err(Error::Leakage(_))
    ));
    let report = evaluate(&model, &train, &test).unwrap();
    assert_eq!(report.total, 10);
    assert_eq!(report.accuracy, report.correct as f64 / report.total as f64);
    assert!(report.confusion.iter().all(|row| row.iter().sum::<usize>() == 5));
}

#[test]
fn identical_strategies_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let train = with_synthetic(&dir.path().join("train"));
    let test = shapes(&dir.path().join("test"), 3, 9);
    let cfg = config(8);
    let rsp = TrainingStrategy::rsp(0.5).unwrap();
    let report = compare_strategies(&train, &test, &[TrainingStrategy::Baseline, rsp, rsp], &cfg, &[0, 1]).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[1].accuracies, report.rows[2].accuracies);
    assert_eq!(report.rows[0].delta, Some(0.0));
    assert!(report.rows.iter().all(|r| r.accuracies.iter().all(|a| (0.0..=1.0).contains(a))));
    let again = compare_strategies(&train, &test, &[TrainingStrategy::Baseline, rsp, rsp], &cfg, &[0, 1]).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
    assert!(report.to_table().contains("rsp(p=0.5)"));
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = shapes(dir.path(), 2, 1);
    let (model, _) = train_classifier(&train, &TrainingStrategy::Baseline, &config(5), 0).unwrap();
    let path = dir.path().join("c.ckpt");
    model.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.classes, model.classes);
    assert_eq!(back.image_shape, model.image_shape);
    assert!(conceptmix::denoiser::Denoiser::load(&path).is_err());
}

#[test]
fn strategy_parameters_are_validated() {
    assert!(TrainingStrategy::rsp(0.0).is_err());
    assert!(TrainingStrategy::rsp(1.5).is_err());
    let p1 = Phase { steps: 100, lr: 1e-2 };
    assert!(TrainingStrategy::two_phase(p1, Phase { steps: 100, lr: 1e-3 }).is_err());
    assert!(TrainingStrategy::two_phase(p1, Phase { steps: 10, lr: 1e-2 }).is_err());
    assert!(TrainingStrategy::two_phase(p1, Phase { steps: 10, lr: 1e-3 }).is_ok());
}
