//! Training, evaluation and command-line behavior on small generated datasets.

use std::path::Path;
use std::process::Command;

use drf_cli::config::{RunConfig, Split};
use drf_cli::data::{build_samples, generate, generate_split, load_split};
use drf_cli::eval::{evaluate_model, load_model, run_eval};
use drf_cli::train::{new_model, run_train, train_model};
use drf_cli::CliError;
use drf_core::heads::{Batch, HeadKind};
use drf_core::raster::Sample;
use drf_core::scenario::Scenario;

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.dir = dir.join("data");
    cfg.data.train = 6;
    cfg.data.val = 2;
    cfg.data.test = 5;
    cfg.train.out = dir.join("run");
    cfg.train.epochs = 1;
    cfg
}

fn drf(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_drf"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.lr = 0.0;
    cfg.train.epochs = 2;
    cfg.model.head.kind = HeadKind::Drr;
    let train = generate_split(&cfg, Split::Train).unwrap();
    let val = generate_split(&cfg, Split::Val).unwrap();
    let before = new_model(&cfg).unwrap();
    let after = train_model(&cfg, &train, &val, None).unwrap().model;
    for ((_, name, a), (_, _, b)) in before.store.iter().zip(after.store.iter()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} changed");
    }
}

#[test]
fn single_scenario_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.head.kind = HeadKind::FullyConv;
    cfg.train.epochs = 10;
    let train = generate_split(&cfg, Split::Train).unwrap()[..1].to_vec();
    let val = generate_split(&cfg, Split::Val).unwrap();
    let outcome = train_model(&cfg, &train, &val, None).unwrap();
    let losses: Vec<f64> = outcome.epochs.iter().map(|e| e.train_nll).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "not monotone: {losses:?}");
    let ln_k = (32.0f64 * 24.0).ln();
    assert!(*losses.last().unwrap() < 0.5 * ln_k, "{losses:?}");
}

#[test]
fn independent_head_follows_a_straight_walk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data.train = 40;
    cfg.data.val = 10;
    cfg.data.test = 10;
    cfg.data.scenario.cross_prob = 0.0;
    cfg.data.scenario.stop_weight = 0.0;
    cfg.data.scenario.speed_sd = 0.0;
    cfg.model.head.kind = HeadKind::FullyConv;
    cfg.train.epochs = 8;
    cfg.train.lr_scale = 300.0;
    let train = generate_split(&cfg, Split::Train).unwrap();
    let val = generate_split(&cfg, Split::Val).unwrap();
    let test = generate_split(&cfg, Split::Test).unwrap();
    let model = train_model(&cfg, &train, &val, None).unwrap().model;
    let refs: Vec<&Scenario> = test.iter().collect();
    let samples = build_samples(&refs, &cfg.frame).unwrap();
    let sample_refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&sample_refs, 10, cfg.model.head.leak).unwrap();
    for (s, pred) in samples.iter().zip(model.predict(&batch).unwrap()) {
        for (t, lg) in pred.marginals.iter().enumerate() {
            let Some(gt) = s.target(t).map(|_| s.gt_bins[t]) else { continue };
            let top = drf_core::grid::normalize(lg).unwrap().argmax();
            let off = top.row.abs_diff(gt.row).max(top.col.abs_diff(gt.col));
            assert!(off <= 1, "scenario {} t {}: argmax {top:?} vs {gt:?}", s.seed, t + 1);
        }
    }
}

#[test]
fn batched_predictions_match_single_sample_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.head.kind = HeadKind::Drf;
    let test = generate_split(&cfg, Split::Test).unwrap();
    let refs: Vec<&Scenario> = test.iter().collect();
    let samples = build_samples(&refs, &cfg.frame).unwrap();
    let mut model = new_model(&cfg).unwrap();
    // Non-zero readouts so the predictions depend on each sample's context.
    let ids: Vec<_> = model.store.iter().filter(|(_, n, _)| n.contains("out")).map(|(id, _, _)| id).collect();
    for (j, id) in ids.into_iter().enumerate() {
        for (i, v) in model.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = ((i * 7 + j * 3) % 11) as f32 * 0.02 - 0.1;
        }
    }
    let all: Vec<&Sample> = samples.iter().collect();
    let batched = model.predict(&Batch::from_samples(&all, 10, 1e-3).unwrap()).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let single = model.predict(&Batch::from_samples(&[s], 10, 1e-3).unwrap()).unwrap();
        for (a, b) in batched[i].marginals.iter().zip(&single[0].marginals) {
            assert_eq!(a.spec(), b.spec());
            assert_eq!(a.spec(), &s.output);
            let err = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4, "sample {i}: {err}");
        }
    }
}

#[test]
fn every_head_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path());
    generate(&base).unwrap();
    for kind in HeadKind::ALL {
        let mut cfg = base.clone();
        cfg.model.head.kind = kind;
        cfg.train.out = dir.path().join(kind.name());
        let outcome = run_train(&cfg).unwrap();
        assert_eq!(outcome.epochs.len(), 1);
        assert!(outcome.best_val.is_finite(), "{kind}");
        let (report, path) = run_eval(&cfg, None).unwrap();
        assert!(path.exists());
        assert_eq!(report.samples, 5);
        assert!(report.mean.nll.is_finite(), "{kind}");
        assert_eq!(report.quantized_modes, kind.components().is_some());
    }
}

#[test]
fn clean_and_noisy_test_reports_cover_the_same_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.head.kind = HeadKind::FullyConv;
    generate(&cfg).unwrap();
    run_train(&cfg).unwrap();
    let model = load_model(&cfg, &cfg.checkpoint_path()).unwrap();
    let clean = load_split(&cfg, Split::Test, None).unwrap();
    let noisy = load_split(&cfg, Split::TestNoisy, None).unwrap();
    assert_ne!(clean, noisy);
    let a = evaluate_model(&model, &cfg, &clean, "clean").unwrap();
    let b = evaluate_model(&model, &cfg, &noisy, "noisy").unwrap();
    assert_eq!(a.samples, b.samples);
    cfg.eval.split = Split::TestNoisy;
    let (_, path) = run_eval(&cfg, None).unwrap();
    assert!(path.ends_with("eval_test_noisy.csv"));
}

#[test]
fn mismatched_checkpoint_names_the_differing_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.head.kind = HeadKind::Drr;
    generate(&cfg).unwrap();
    run_train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.head.kind = HeadKind::Drf;
    other.model.head.proj_channels = 16;
    match load_model(&other, &cfg.checkpoint_path()) {
        Err(CliError::Config(msg)) => {
            assert!(msg.contains("head"), "{msg}");
            assert!(msg.contains("head_widths"), "{msg}");
        }
        Err(e) => panic!("wrong error kind: {e}"),
        Ok(_) => panic!("mismatch accepted"),
    }
}

#[test]
fn exit_codes_distinguish_config_data_and_numerical_errors() {
    let dir = tempfile::tempdir().unwrap();
    let code = |out: std::process::Output| out.status.code().unwrap();
    assert_eq!(code(drf(dir.path(), &["train", "--set", "model.head.kind=\"lstm\""])), 2);
    assert_eq!(code(drf(dir.path(), &["eval", "--set", "train.bogus=1"])), 2);
    // No dataset on disk yet.
    assert_eq!(code(drf(dir.path(), &["train"])), 3);
    let sets = ["--set", "data.train=4", "--set", "data.val=2", "--set", "data.test=2"];
    let with = |cmd: &[&'static str]| -> Vec<&str> { cmd.iter().copied().chain(sets).collect() };
    assert!(drf(dir.path(), &with(&["gen"])).status.success());
    // An absurd learning rate drives the loss to infinity or NaN.
    let out = drf(
        dir.path(),
        &with(&["train", "--epochs", "3", "--out", "bad", "--set", "train.lr_scale=1e30"]),
    );
    assert_eq!(code(out), 4);
    assert!(dir.path().join("bad/nan_batch.json").exists());
}

#[test]
fn training_logs_repeat_with_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.head.kind = HeadKind::Drf;
    cfg.train.epochs = 2;
    let train = generate_split(&cfg, Split::Train).unwrap();
    let val = generate_split(&cfg, Split::Val).unwrap();
    let a = train_model(&cfg, &train, &val, None).unwrap();
    let b = train_model(&cfg, &train, &val, None).unwrap();
    assert_eq!(a.log_hash, b.log_hash);
    cfg.train.seed = 1;
    let c = train_model(&cfg, &train, &val, None).unwrap();
    assert_ne!(a.log, c.log);
}
