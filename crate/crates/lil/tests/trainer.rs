//! Integration tests for the training loops. All runs here are tiny; their
//! job is to pin interface behavior, not to converge.

use lil::generator::Generator;
use lil::procgen::write_dataset;
use lil::regressor::Regressor;
use lil::trainer::{train_baseline_regressor, train_generator, RegTrainConfig, TrainConfig};
use std::path::Path;

fn tiny_dataset(dir: &Path, n_scenes: usize, k_lights: usize, seed: u64) {
    write_dataset(dir, n_scenes, k_lights, 16, seed).unwrap();
}

fn tiny_cfg(n_scenes: usize) -> TrainConfig {
    TrainConfig {
        n_scenes,
        k_lights: 1,
        steps: 2,
        batch: 2,
        lr: 1e-3,
        seed: 3,
        holdout: 2,
        eval_every: 1,
        threshold: 0.05,
        style_jitter: 0.0,
        adversarial_steps: 0,
    }
}

#[test]
fn one_step_smoke_logs_a_finite_loss() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 6, 1, 1);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("gen.ckpt");
    let log = out.path().join("train.csv");
    let mut cfg = tiny_cfg(6);
    cfg.steps = 1;
    let outcome = train_generator(data.path(), &cfg, &ckpt, &log).unwrap();

    let csv = std::fs::read_to_string(&log).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,heldout"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    let loss: f64 = first[1].parse().unwrap();
    assert!(loss.is_finite() && loss > 0.0);

    // Checkpoint written even though one step cannot converge.
    let (_, meta) = Generator::load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.train.converged, Some(false));
    assert!(meta.train.final_heldout_l1.unwrap() > 0.0);
    assert!(!outcome.converged);
}

#[test]
fn same_seed_reproduces_the_run_exactly() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 6, 1, 2);
    let run = |tag: &str| {
        let out = tempfile::tempdir().unwrap();
        let ckpt = out.path().join(format!("{tag}.ckpt"));
        let log = out.path().join(format!("{tag}.csv"));
        let cfg = tiny_cfg(6);
        let outcome = train_generator(data.path(), &cfg, &ckpt, &log).unwrap();
        (
            std::fs::read_to_string(&log).unwrap(),
            outcome.meta.content_hash,
            outcome.final_heldout_l1,
        )
    };
    let (log_a, hash_a, h_a) = run("a");
    let (log_b, hash_b, h_b) = run("b");
    assert_eq!(log_a, log_b, "training curves must match line for line");
    assert_eq!(hash_a, hash_b, "final weights must be identical");
    assert_eq!(h_a, h_b);
}

/// The generator loop must work on a dataset whose ground-truth directory
/// has been deleted outright: its data view never touches `gt/`.
#[test]
fn generator_training_never_reads_ground_truth() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 6, 1, 3);
    std::fs::remove_dir_all(data.path().join("gt")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let outcome = train_generator(
        data.path(),
        &tiny_cfg(6),
        &out.path().join("gen.ckpt"),
        &out.path().join("train.csv"),
    )
    .unwrap();
    assert!(outcome.final_heldout_l1.is_finite());
}

#[test]
fn dataset_shape_mismatch_is_rejected() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 6, 1, 4);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(7);
    let err = train_generator(
        data.path(),
        &cfg,
        &out.path().join("gen.ckpt"),
        &out.path().join("train.csv"),
    )
    .unwrap_err();
    assert!(matches!(err, lil::LilError::Config(_)), "got {err:?}");
}

#[test]
fn adversarial_flag_runs_and_logs_separately() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 6, 1, 5);
    let out = tempfile::tempdir().unwrap();
    let log = out.path().join("train.csv");
    let mut cfg = tiny_cfg(6);
    cfg.steps = 1;
    cfg.adversarial_steps = 2;
    train_generator(data.path(), &cfg, &out.path().join("gen.ckpt"), &log).unwrap();
    let adv = std::fs::read_to_string(out.path().join("train_adversarial.csv")).unwrap();
    let mut lines = adv.lines();
    assert_eq!(lines.next(), Some("step,d_loss,g_loss"));
    for line in lines {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 3);
        assert!(parts[1].parse::<f64>().unwrap().is_finite());
        assert!(parts[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn regressor_smoke_and_reload() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 5, 2, 6);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("reg.ckpt");
    let log = out.path().join("reg.csv");
    let cfg = RegTrainConfig {
        steps: 2,
        batch: 2,
        lr: 1e-3,
        seed: 9,
        holdout: 1,
        eval_every: 1,
        threshold_angular: 0.15,
    };
    let outcome = train_baseline_regressor(data.path(), &cfg, &ckpt, &log).unwrap();
    assert!(outcome.final_heldout_angular.is_finite());
    let (reg, meta) = Regressor::load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.steps, 2);
    assert!(meta.final_heldout_angular.is_some());
    // The reloaded weights still produce decodable output.
    let img = lil::io::read_png(
        &data
            .path()
            .join(&lil::procgen::DatasetManifest::load(data.path()).unwrap().records[0].image),
    )
    .unwrap();
    let pred = reg.forward(img.view()).unwrap();
    assert!(pred.iter().all(|v| (0.0..=1.0).contains(v)));
}
