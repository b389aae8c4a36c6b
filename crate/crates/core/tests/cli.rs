use std::path::Path;
use std::process::{Command, Output};

use gaia_core::model::ModelConfig;
use gaia_core::train::read_metrics;
use serde_json::{json, Value};

fn gaia(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaia"))
        .current_dir(dir)
        .env("GAIA_THREADS", "1")
        .args(args)
        .output()
        .expect("spawn gaia")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = gaia(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary json")
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(stderr.trim_end().lines().last().unwrap()).expect("error json");
    assert_eq!(v["error"]["exit_code"].as_i64(), out.status.code().map(i64::from));
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn small_config(dir: &Path) {
    let cfg = json!({
        "model": ModelConfig::tiny(),
        "schedule": {"total_epochs": 2, "e_w": 1, "e_p": 1, "batch_size": 2},
        "data": {"height": 32, "width": 32, "n_timesteps": 4},
        "finetune": {"epochs": 2, "batch_size": 2},
        "eval": {"ratios": [0.3, 0.7]}
    });
    std::fs::write(dir.join("small.json"), cfg.to_string()).unwrap();
}

#[test]
fn help_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let help = gaia(d.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("GAIA_THREADS"));
    let bad = gaia(d.path(), &["pretrain", "--no-such-flag"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(error_kind(&bad), "usage");
}

#[test]
fn missing_input_and_bad_config() {
    let d = tempfile::tempdir().unwrap();
    let missing = gaia(d.path(), &["pretrain", "--data", "nope/manifest.jsonl", "--out", "o"]);
    assert_eq!(missing.status.code(), Some(4));
    std::fs::write(d.path().join("bad.json"), r#"{"schedule": {"e_p": 0}}"#).unwrap();
    let bad = gaia(d.path(), &["--config", "bad.json", "synth", "--out", "o"]);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(error_kind(&bad), "config");
}

#[test]
fn small_pipeline_is_reproducible_from_its_run_config() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_config(p);
    ok(p, &["--config", "small.json", "synth", "--out", "data"]);
    assert!(p.join("data/frames/frame_0003.fld").exists());

    let zero = ok(p, &["--config", "small.json", "pretrain", "--data", "data/manifest.jsonl", "--epochs", "0", "--out", "p0"]);
    assert_eq!(zero["steps"], 0);
    assert!(p.join("p0/model.ckpt").exists());
    assert!(read_metrics(&p.join("p0/metrics.jsonl")).unwrap().is_empty());

    ok(p, &["--config", "small.json", "pretrain", "--data", "data/manifest.jsonl", "--out", "a"]);
    ok(p, &["--config", "a/run_config.json", "pretrain", "--data", "data/manifest.jsonl", "--out", "b"]);
    let (ra, rb) = (read_metrics(&p.join("a/metrics.jsonl")).unwrap(), read_metrics(&p.join("b/metrics.jsonl")).unwrap());
    assert_eq!(ra.len(), 4);
    assert_eq!(ra, rb);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(p.join("a/outputs_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(files.iter().any(|f| f.ends_with("model.ckpt")));
    assert!(files.iter().any(|f| f.ends_with("metrics.jsonl")));

    let model = "a/model.ckpt";
    let sweep = ok(p, &["--config", "small.json", "gapfill", "--sweep", "--model", model, "--data", "data/manifest.jsonl", "--out", "s"]);
    assert!(sweep.is_object());
    assert!(p.join("s/sweep.csv").exists());
    ok(p, &["--config", "small.json", "gapfill", "--model", model, "--data", "data/manifest.jsonl", "--out", "g"]);
    assert!(p.join("g/composite.fld").exists() && p.join("g/gapfill.png").exists());
    ok(p, &["--config", "small.json", "pca", "--model", model, "--data", "data/manifest.jsonl", "--out", "pca"]);
    ok(p, &["--config", "small.json", "coherence", "--model", model, "--data", "data/manifest.jsonl", "--max-lag", "2", "--out", "coh"]);
    assert!(p.join("coh/coherence.csv").exists());
    ok(p, &["--config", "small.json", "finetune", "--task", "ar", "--model", model, "--labels", "data/manifest_ar.jsonl", "--out", "ft"]);
    let ev = ok(p, &["--config", "small.json", "eval", "--task", "ar", "--model", "ft/task.ckpt", "--labels", "data/manifest_ar.jsonl", "--out", "ev"]);
    assert!(ev.is_object());
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(p.join("ev/eval.json")).unwrap()).unwrap();
    assert!(eval.get("pixel").is_some() || eval.to_string().contains("f1"));
    ok(p, &["--config", "small.json", "adapter-shapes", "--out", "ad"]);
    ok(p, &["report", "--inputs", "s", "pca", "coh", "ev", "--out", "rep"]);
}
