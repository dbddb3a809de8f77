//! The `me-lab` binary end to end: exit codes and the files each command
//! leaves behind, on a corpus small enough to train in seconds. Compiled
//! into the acceptance binary so it runs even when a criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn me_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_me-lab"))
        .args(args)
        .env("ME_LAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "output_dir": dir,
        "synthgen": { "n_familiar": 3, "n_novel": 2, "train_per_class": 8, "min_train_per_class": 6,
                      "test_per_class": 4, "seed": 4 },
        "train": { "max_epochs": 2, "init": { "audio_pretrained": false, "vision_pretrained": false } },
        "evaltest": { "n_episodes": 20 },
        "analyze": { "pairs_per_group": 40, "instances_per_word": 2 },
        "stats": { "n_resamples": 100, "n_permutations": 100 }
    });
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn malformed_json_is_a_config_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"seed\": 1,\n  \"train\": {\n").unwrap();
    let out = me_lab(&["gen-data", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.json:"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    fs::write(&path, "{\"seed\": 1, \"trian\": {}}").unwrap();
    let out = me_lab(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("trian"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&me_lab(&["frobnicate"])), 2);
    assert_eq!(code(&me_lab(&["eval"])), 2);
    let out = me_lab(&["eval", "--run", "/nonexistent", "--kinds", "familiar_familiar,bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));
    assert_eq!(code(&me_lab(&["--help"])), 0);
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = me_lab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_me-lab"))
        .args(["report", "--runs", "/nonexistent", "--out", "/nonexistent/out"])
        .env("ME_LAB_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn full_pipeline_on_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&me_lab(&["gen-data", "--config", c])), 0);
    assert!(dir.path().join("data/manifest.json").is_file());

    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let out = me_lab(&["train", "--config", c, "--run-dir", r, "--timing"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["run.json", "best.ckpt", "train_log.csv", "train_log.json", "timing.csv", "checkpoints/epoch-000.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let out = me_lab(&["eval", "--run", r, "--kinds", "me_familiar_novel,novel_novel", "--episodes", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trials = fs::read_to_string(run.join("eval/trials.csv")).unwrap();
    assert!(trials.lines().skip(1).all(|l| l.contains("me_familiar_novel") || l.contains("novel_novel")));
    assert!(run.join("eval/stats_summary.csv").is_file());

    let out = me_lab(&["analyze", "--run", r, "--analyses", "groups,per_word"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(run.join("analyze/groups.csv").is_file());
    assert!(!run.join("analyze/familiar_pick_matrix.csv").exists());

    // A report survives runs that are missing or were never evaluated.
    let report = dir.path().join("report");
    let missing = dir.path().join("nowhere");
    let out = me_lab(&[
        "report",
        "--runs",
        r,
        missing.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let md = fs::read_to_string(report.join("report.md")).unwrap();
    assert!(md.contains("1 run(s) included, 1 absent"), "{md}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&me_lab(&["gen-data", "--config", c])), 0);
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    assert_eq!(code(&me_lab(&["train", "--config", c, "--run-dir", r])), 0);
    assert!(!run.join("timing.csv").exists(), "timing is opt-in");
    let last = run.join("checkpoints/epoch-002.ckpt");
    let straight = fs::read(&last).unwrap();
    let log_straight = fs::read(run.join("train_log.csv")).unwrap();

    let from = run.join("checkpoints/epoch-001.ckpt");
    let out = me_lab(&["train", "--config", c, "--run-dir", r, "--resume", from.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&last).unwrap(), straight, "epoch 2 differs after resuming");
    assert_eq!(fs::read(run.join("train_log.csv")).unwrap(), log_straight);
}
