//! End-to-end tests of the `anesi` binary: exit codes, artifact layout,
//! and seeded reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn anesi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anesi"))
        .args(args)
        .current_dir(dir)
        .env_remove("ANESI_SEED")
        .output()
        .expect("binary runs")
}

fn read_metrics(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .expect("metrics file exists")
        .lines()
        .map(|l| serde_json::from_str(l).expect("line is JSON"))
        .collect()
}

/// Metrics lines with wall-clock timing removed, for equality checks.
fn stable_metrics(path: &Path) -> Vec<serde_json::Value> {
    read_metrics(path)
        .into_iter()
        .map(|mut v| {
            v.as_object_mut().unwrap().remove("seconds");
            v
        })
        .collect()
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(
        &[
            "train",
            "--config",
            "desk-n1",
            "--epochs",
            "3",
            "--seed",
            "5",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read_metrics(&dir.path().join("run/metrics.jsonl"));
    assert_eq!(metrics.len(), 3);
    for (i, line) in metrics.iter().enumerate() {
        assert_eq!(line["epoch"], i);
        assert_eq!(line["variant"], "predict");
        assert_eq!(line["N"], 1);
        assert!(line["acc_symbolic"].is_f64() || line["acc_symbolic"].is_u64());
    }
    assert!(dir.path().join("run/checkpoint.anesi").is_file());
}

#[test]
fn same_seed_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = anesi(
            &[
                "train", "--config", "desk-n1", "--epochs", "2", "--seed", "9", "--out", name,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // identical up to wall-clock seconds
    assert_eq!(
        stable_metrics(&dir.path().join("a/metrics.jsonl")),
        stable_metrics(&dir.path().join("b/metrics.jsonl"))
    );
}

#[test]
fn env_seed_fills_in_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed_args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_anesi"));
        cmd.args(["train", "--config", "desk-n1", "--epochs", "1", "--out", name])
            .args(seed_args)
            .current_dir(dir.path())
            .env_remove("ANESI_SEED");
        if let Some(v) = env {
            cmd.env("ANESI_SEED", v);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stable_metrics(&dir.path().join(name).join("metrics.jsonl"))
    };
    let by_flag = run("flag", &["--seed", "11"], None);
    let by_env = run("env", &[], Some("11"));
    let flag_beats_env = run("both", &["--seed", "11"], Some("4444"));
    assert_eq!(by_flag, by_env);
    assert_eq!(by_flag, flag_beats_env);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(&["train", "--variant", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("bad.json"), "{\"mystery\": 1}").unwrap();
    let out = anesi(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));

    let out = anesi(&["train", "--config", "does-not-exist.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // clap rejects unknown flags with the same code
    let out = anesi(&["train", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(
        &["eval", "--checkpoint", "nope.anesi", "--config", "desk-n1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.anesi"));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("hot.json"),
        "{\"train\": {\"lr\": 1e308, \"epochs\": 1, \"k\": 10, \"hidden\": [16]}, \
         \"train_size\": 32, \"test_size\": 8}",
    )
    .unwrap();
    let out = anesi(&["train", "--config", "hot.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn eval_matches_final_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(
        &[
            "train", "--config", "desk-n1", "--epochs", "2", "--seed", "3", "--out", "run",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let last = read_metrics(&dir.path().join("run/metrics.jsonl"))
        .pop()
        .unwrap();
    let out = anesi(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.anesi",
            "--config",
            "desk-n1",
            "--seed",
            "3",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["acc_symbolic"], last["acc_symbolic"]);
    assert_eq!(summary["acc_neural"], last["acc_neural"]);
    assert_eq!(summary["beam"], 100);
}

#[test]
fn timing_reports_all_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(
        &[
            "timing",
            "--n-list",
            "1,2",
            "--repeats",
            "3",
            "--out",
            "timing.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("timing.json")).unwrap())
            .unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["n"], 1);
    assert!(entries[0]["median_seconds"].as_f64().unwrap() > 0.0);

    let out = anesi(&["timing", "--n-list", "1,zap"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_pruner_passes_and_rejects_large_n() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(
        &["verify-pruner", "--n", "2", "--cases", "10"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let levels = report["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 4, "world+output at n = 1, 2");

    let out = anesi(&["verify-pruner", "--n", "4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradest_bench_emits_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = anesi(
        &[
            "gradest-bench",
            "--fit-iters",
            "200",
            "--samples",
            "50",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["cards"], serde_json::json!([2, 2]));
    assert!(report["score_variance"].as_f64().unwrap() > 0.0);
    assert!(report["cosine_surrogate"].as_f64().unwrap() > 0.0);
}
