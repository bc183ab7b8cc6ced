//! End-to-end tests of the `comba` binary: argument handling, exit codes,
//! and the files each subcommand leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn comba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comba"))
        .args(args)
        .env("COMBA_THREADS", "1")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY_TRAIN: &str = r#"{
    "version": 1,
    "model": {"vocab": 16, "model_dim": 32, "layers": 1, "heads": 2,
              "head_dk": 16, "head_dv": 16, "chunk_size": 8},
    "task": {"vocab": 16, "num_pairs": 2, "num_queries": 2, "seq_len": 12},
    "train": {"steps": 6, "batch": 4, "seed": 7, "eval_every": 0,
              "eval_instances": 16, "log_every": 2, "checkpoint_every": 3,
              "optim": {"lr": 0.003, "warmup_steps": 2}}
}"#;

#[test]
fn verify_single_suite_passes() {
    let out = comba(&["verify", "--suite", "reductions", "--seed", "7"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("reductions:") && text.contains("0 failures"), "{text}");
    assert!(text.contains("[PASS]"), "{text}");
}

#[test]
fn verify_reports_injected_fault_and_fails() {
    let out = comba(&[
        "verify",
        "--suite",
        "equivalence",
        "--mutation",
        "feedback-sign-flip",
    ]);
    assert!(!out.status.success(), "a mutated run must exit nonzero");
    let text = stdout(&out);
    assert!(text.contains("[FAIL]"), "{text}");
    assert!(text.contains("failure:"), "{text}");
}

#[test]
fn verify_rejects_unknown_suite() {
    let out = comba(&["verify", "--suite", "nope"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("available suites"), "{}", stderr(&out));
}

#[test]
fn train_writes_metrics_and_checkpoint_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_TRAIN);
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_string_lossy().into_owned();

    let out = comba(&["train", "--config", &config, "--out", &out_str]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("trained to step 6"), "{}", stdout(&out));

    let metrics = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(events.iter().any(|e| e["event"] == "step"), "{metrics}");
    assert!(events.iter().any(|e| e["event"] == "eval"), "{metrics}");
    assert!(events.iter().any(|e| e["event"] == "checkpoint"), "{metrics}");

    let ckpt = out_dir.join("checkpoint.ckpt");
    let info = comba_cli::checkpoint::load_info(&ckpt).unwrap();
    assert_eq!(info.step, 6);
    assert_eq!(info.precision_name, "single");

    // Resuming from the final checkpoint runs zero steps but still reports.
    let out = comba(&[
        "train", "--config", &config, "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("trained to step 6"), "{}", stdout(&out));

    // Wrong precision for the file is refused up front.
    let out = comba(&[
        "train", "--config", &config, "--precision", "double", "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("precision"), "{}", stderr(&out));
}

#[test]
fn identical_train_invocations_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_TRAIN);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = comba(&["train", "--config", &config, "--out", &out_dir.to_string_lossy()]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        bytes.push(fs::read(out_dir.join("checkpoint.ckpt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "same seed and config must give the same bytes");
}

#[test]
fn train_rejects_config_without_required_sections() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"version": 1, "model": {}}"#);
    let out = comba(&["train", "--config", &config]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("task"), "{}", stderr(&out));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"version": 1, "trian": {}}"#);
    let out = comba(&["train", "--config", &config]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown field"), "{}", stderr(&out));
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mqar");
    let b = dir.path().join("b.mqar");
    for path in [&a, &b] {
        let out = comba(&[
            "gen-data", "--out", path.to_str().unwrap(),
            "--seed", "11", "--instances", "32",
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("wrote 32 instances"), "{}", stdout(&out));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = comba_core::tasks::Dataset::load(&a).unwrap();
    assert_eq!(ds.num_instances(), 32);
}

#[test]
fn bench_writes_csv_for_a_configured_case() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "version": 1,
            "bench": [{"seq_len": 64, "chunk_size": 16, "heads": 2,
                       "head_dk": 8, "head_dv": 8, "warmup_iters": 0,
                       "timed_iters": 2}]
        }"#,
    );
    let csv_path = dir.path().join("results.csv");
    let out = comba(&[
        "bench", "--config", &config, "--out", csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# threads="));
    assert!(lines[1].starts_with("variant,"));
    assert_eq!(lines.len(), 3, "{csv}");
}

#[test]
fn missing_config_file_is_a_clean_error() {
    let out = comba(&["train", "--config", "/nonexistent/run.json"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
}
