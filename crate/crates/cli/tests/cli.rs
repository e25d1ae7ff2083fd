use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn streamtpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamtpp")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tiny_config(dir: &Path) -> String {
    let cfg = json!({
        "data": { "kind": "two_regime", "num_sequences": 6, "horizon": 60.0 },
        "num_tasks": 2,
        "model": { "type_dim": 4, "time_dim": 4, "encoder_layers": 1, "pool_size": 4, "top_n": 2, "prompt_len": 2 },
        "train": { "mc_samples": 5, "max_epochs": 2, "patience": 2 },
        "sampler": { "mbr_samples": 5 },
        "seed": 3
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn assert_one_line_error(out: &Output, kind: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let line = err.lines().last().expect("stderr has a line");
    let v: Value = serde_json::from_str(line).expect("error line is JSON");
    assert_eq!(v["error"], kind, "{line}");
    assert!(v["message"].is_string());
}

#[test]
fn gradcheck_default_toy_passes_tolerance() {
    let out = streamtpp(&["gradcheck", "--tolerance", "1e-4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(v["entries_checked"].as_u64().unwrap() > 0);
}

#[test]
fn gradcheck_impossible_tolerance_fails() {
    let out = streamtpp(&["gradcheck", "--tolerance", "0"]);
    assert_one_line_error(&out, "numerical");
}

#[test]
fn missing_config_is_an_io_error() {
    let out = streamtpp(&["run", "--config", "/nonexistent/config.json"]);
    assert_one_line_error(&out, "io");
}

#[test]
fn invalid_config_reports_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, json!({ "num_tasks": 0 }).to_string()).unwrap();
    assert_one_line_error(&streamtpp(&["run", "--config", path.to_str().unwrap()]), "config");

    fs::write(&path, "{ not json").unwrap();
    assert_one_line_error(&streamtpp(&["run", "--config", path.to_str().unwrap()]), "serde");
}

#[test]
fn unknown_scheme_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = streamtpp(&["run", "--config", &cfg, "--scheme", "rehearsal"]);
    assert!(!out.status.success());
}

#[test]
fn generate_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("stream.jsonl");
    let out = streamtpp(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["sequences"], 6);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let _: Value = serde_json::from_str(line).unwrap();
    }
}

#[test]
fn run_train_predict_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = streamtpp(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--scheme", "prompt_continual"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary[0]["scheme"], "prompt_continual");
    assert_eq!(summary[0]["rehearsal_reads"], 0);
    for f in ["prompt_continual.csv", "prompt_continual.json", "prompt_continual_predictions.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let ck = out_dir.join("prompt_continual_checkpoints");
    assert!(ck.join("task_1.json").exists());
    assert!(ck.join("task_0_train_log.csv").exists());

    let preds = out_dir.join("prompt_continual_predictions.csv");
    let out = streamtpp(&["report", "--predictions", preds.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = stdout_json(&out);
    let run_json: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("prompt_continual.json")).unwrap()).unwrap();
    assert_eq!(rep["avg_error_rate"], run_json["avg_error_rate"]);

    let ckpt = dir.path().join("task0.json");
    let out = streamtpp(&["train", "--config", &cfg, "--task", "0", "--out", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("task0.log.csv").exists());
    let saved: Value = serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert!(!saved["rng"].is_null());

    let data = dir.path().join("stream.jsonl");
    assert!(streamtpp(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let pred_out = dir.path().join("preds.csv");
    let args = [
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pred_out.to_str().unwrap(),
        "--config",
        &cfg,
        "--after",
        "50",
    ];
    let a = streamtpp(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = fs::read(&pred_out).unwrap();
    let b = streamtpp(&args);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(first, fs::read(&pred_out).unwrap());
    assert!(stdout_json(&a)["targets"].as_u64().unwrap() > 0);
}

#[test]
fn train_rejects_out_of_range_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out =
        streamtpp(&["train", "--config", &cfg, "--task", "5", "--out", dir.path().join("x.json").to_str().unwrap()]);
    assert_one_line_error(&out, "invalid_argument");
}
