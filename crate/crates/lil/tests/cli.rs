//! End-to-end runs of the `lil` binary: a miniature pipeline plus the
//! error contract (nonzero exit, one JSON record on stderr).

use std::path::Path;
use std::process::{Command, Output};

fn lil() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lil"))
}

fn run_ok(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().expect("spawn lil");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "command failed\nstdout: {stdout}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let record: serde_json::Value =
        serde_json::from_str(stdout.lines().last().expect("status line")).expect("status JSON");
    assert_eq!(record["status"], "ok");
    record
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success(), "expected failure");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rfind(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON record on stderr: {stderr}"));
    serde_json::from_str(line).expect("error JSON")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out_root = dir.join("run");
    let text = format!(
        r#"
seed = 5
out_root = "{}"

[procgen]
n_scenes = 6
dz = 16

[trainer]
n_scenes = 6
steps = 12
batch = 2
holdout = 2
eval_every = 6

[search]
n_train_scenes = 3
n_val_scenes = 2
steps = 6
batch = 2

[relight]
k = 1

[eval]
n_scenes = 2
qualitative = 1

[robustness]
n_scenes = 1
"#,
        out_root.display()
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn tiny_pipeline_produces_the_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");

    run_ok(lil().args(["procgen", "--config"]).arg(&cfg));
    assert!(run.join("dataset/manifest.json").is_file());
    assert!(run.join("resolved_config.toml").is_file());

    let train = run_ok(lil().args(["train", "--config"]).arg(&cfg));
    assert!(run.join("checkpoints/generator.ckpt").is_file());
    assert!(train["detail"]["final_heldout_l1"].as_f64().is_some());

    run_ok(lil().args(["find-direction", "--kind", "albedo", "--config"]).arg(&cfg));
    assert!(run.join("offsets/albedo.json").is_file());
    assert!(run.join("offsets/albedo.bin").is_file());

    let eval = run_ok(lil().args(["evaluate", "--kind", "albedo", "--config"]).arg(&cfg));
    let report = run.join("reports/albedo");
    assert!(report.join("index.json").is_file());
    assert!(report.join("plots/qualitative.png").is_file());
    let csv = report.join("metrics_albedo.csv");
    // Header plus one row per evaluation scene.
    let body = std::fs::read(&csv).unwrap();
    assert_eq!(String::from_utf8_lossy(&body).lines().count(), 3);
    assert!(eval["detail"]["means"]["l1"].as_f64().unwrap() > 0.0);

    // The same artifacts scored again must reproduce the report byte for byte.
    run_ok(lil().args(["evaluate", "--kind", "albedo", "--config"]).arg(&cfg));
    assert_eq!(std::fs::read(&csv).unwrap(), body);
}

#[test]
fn missing_artifacts_fail_with_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    // No checkpoint was ever trained in this out_root.
    let out = lil()
        .args(["evaluate", "--kind", "normal", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    let record = error_record(&out);
    assert_eq!(record["status"], "error");
    let msg = record["message"].as_str().unwrap();
    assert!(msg.contains("generator checkpoint"), "message: {msg}");
    assert!(msg.contains("lil train"), "message: {msg}");
}

#[test]
fn config_and_flag_validation_reaches_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "not_a_key = 1\n").unwrap();
    let out = lil().args(["procgen", "--config"]).arg(&bad).output().unwrap();
    let record = error_record(&out);
    assert_eq!(record["kind"], "config");
    assert!(record["message"].as_str().unwrap().contains("not_a_key"));

    let out = lil()
        .args(["find-direction", "--kind", "vibes", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(error_record(&out)["message"]
        .as_str()
        .unwrap()
        .contains("vibes"));

    let out = lil()
        .args(["procgen", "--config"])
        .arg(&cfg)
        .env("LIL_DEVICE", "tpu")
        .output()
        .unwrap();
    let record = error_record(&out);
    assert!(record["message"].as_str().unwrap().contains("tpu"));
    assert_eq!(record["kind"], "config");
}
