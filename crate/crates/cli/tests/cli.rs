use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lasslab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lasslab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = lasslab(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("run summary on stdout")
}

fn tiny_model() -> Value {
    json!({
        "d_model": 16, "d_h": 8, "d_z": 3, "k_token": 4, "n_blocks": 1, "n_heads": 2,
        "n_moe_experts": 3, "moe_top_k": 2, "n_csh_tokens": 2, "n_rbf_centers": 6,
        "max_channels": 8, "d_ff": 16, "d_hidden": 12
    })
}

/// Two swing groups of two records each: one for pretraining, one for testing.
fn tiny_config(dir: &Path, pretrain_epochs: usize) -> PathBuf {
    let group = |tag: &str| json!({"family": "swing", "tag": tag, "n_seeds": 1, "limit": 2});
    let cfg = json!({
        "seed": 3,
        "corpus": {"prefix_ratio": 0.4, "groups": [group("pretrain"), group("test")]},
        "model": tiny_model(),
        "pretrain": {"epochs": pretrain_epochs, "batch_size": 2},
        "bench": {"n_steps": [1000], "repeats": 20, "latency_records": 4, "latency_runs": 2}
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn eval_rows(dir: &Path) -> Vec<(String, String, f64)> {
    let text = String::from_utf8(read(&dir.join("eval/eval_report.csv"))).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_owned(), f[2].to_owned(), f[5].parse().unwrap())
        })
        .collect()
}

/// Mean MSE (x1e-2) of the group row for `tag`.
fn group_mse(dir: &Path, tag: &str) -> f64 {
    eval_rows(dir)
        .into_iter()
        .find(|(scope, t, _)| scope == "group" && t == tag)
        .unwrap_or_else(|| panic!("no group row for {tag}"))
        .2
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"pretrain": {"learning_rat": 0.1}}"#).unwrap();
    let out = lasslab(&["pretrain", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`pretrain.learning_rat`"));

    std::fs::write(&cfg, r#"{"model": {"n_heads": 3}}"#).unwrap();
    let out = lasslab(&["pretrain", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`model`"));

    let out = lasslab(&["pretrain", "--out", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`paths.dataset`"));

    let out = lasslab(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let c = cfg.to_str().unwrap();
    ok(&["generate", "--config", c], dir.path());
    let manifest: Value = serde_json::from_slice(&read(&dir.path().join("runs/dataset/manifest.json"))).unwrap();
    let csv = manifest["records"][0]["csv"].as_str().unwrap();
    let target = dir.path().join("runs/dataset").join(csv);
    let mut bytes = read(&target);
    bytes.push(b'\n');
    std::fs::write(&target, bytes).unwrap();
    let out = lasslab(&["pretrain", "--config", c], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain: stage read-dataset"), "{err}");
}

#[test]
fn untrained_model_predicts_constant_channels_and_copied_truth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let c = cfg.to_str().unwrap();
    ok(&["generate", "--config", c], dir.path());
    ok(&["pretrain", "--config", c], dir.path());
    let summary = ok(&["predict", "--config", c], dir.path());
    assert_eq!(summary["command"], "predict");
    let pred_dir = dir.path().join("runs/predictions");
    let index: Value = serde_json::from_slice(&read(&pred_dir.join("index.json"))).unwrap();
    assert_eq!(index["adapted"], false);
    let files: Vec<String> = index["records"].as_object().unwrap().values().map(|v| v.as_str().unwrap().to_owned()).collect();
    assert_eq!(files.len(), 2);

    for f in &files {
        let mut reader = csv::Reader::from_path(pred_dir.join(f)).unwrap();
        let mut by_channel: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        for r in &rows {
            by_channel.entry(r[2].to_owned()).or_default().push(r[5].parse().unwrap());
        }
        for (ch, v) in &by_channel {
            assert!(v.iter().all(|x| *x == v[0]), "{f} channel {ch} is not constant");
        }
        // Replace predictions by the truth columns for the eval check below.
        let mut w = csv::Writer::from_path(pred_dir.join(f)).unwrap();
        w.write_record(reader.headers().unwrap()).unwrap();
        for r in &rows {
            w.write_record([&r[0], &r[1], &r[2], &r[4], &r[4], &r[6], &r[6]]).unwrap();
        }
        w.flush().unwrap();
    }
    ok(&["eval", "--config", c], dir.path());
    let rows = eval_rows(&pred_dir);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.2 == 0.0), "{rows:?}");
}

#[test]
fn same_seed_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let c = cfg.to_str().unwrap();
    let mut hashes = Vec::new();
    for out in ["a", "b"] {
        ok(&["generate", "--config", c, "--out", out], dir.path());
        let s = ok(&["pretrain", "--config", c, "--out", out], dir.path());
        hashes.push(s["config_hash"].as_str().unwrap().to_owned());
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for f in ["dataset/manifest.json", "model/model.json", "model/model.bin"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    // Hashes differ only through the output root.
    assert_ne!(hashes[0], hashes[1]);
    ok(&["generate", "--config", c, "--out", "c", "--seed", "4"], dir.path());
    assert_ne!(read(&a.join("dataset/manifest.json")), read(&dir.path().join("c/dataset/manifest.json")));
}

#[test]
fn bench_writes_report_and_latency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let c = cfg.to_str().unwrap();
    ok(&["generate", "--config", c], dir.path());
    let summary = ok(&["bench", "--config", c], dir.path());
    assert_eq!(summary["outputs"].as_array().unwrap().len(), 2);
    let csv = String::from_utf8(read(&dir.path().join("runs/bench/bench_report.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,d_z,d_model,K_width,L_mlp,n_step,flops,median_ns,iqr_ns");
    assert_eq!(lines.len(), 3);
    let latency: Value = serde_json::from_slice(&read(&dir.path().join("runs/bench/latency.json"))).unwrap();
    assert_eq!(latency["base"]["n_records"], 4);
    assert!(latency["adapted"].is_null());
    assert!(dir.path().join("runs/bench/run_summary.json").exists());
}

/// Three families, eight scenarios per group, default model.
#[test]
fn pipeline_finetuning_beats_frozen_base_on_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.json");
    let body = json!({
        "pretrain": {"epochs": 50, "batch_size": 4},
        "lora": {"n_clusters": 3},
        "finetune": {"epochs": 30, "batch_size": 4},
        "predict": {"svg": true}
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let c = cfg.to_str().unwrap();
    for cmd in ["generate", "pretrain", "cluster"] {
        ok(&[cmd, "--config", c], dir.path());
    }
    ok(&["predict", "--config", c, "--base", "--predictions", "base"], dir.path());
    ok(&["eval", "--config", c, "--predictions", "base"], dir.path());
    ok(&["finetune", "--config", c], dir.path());
    ok(&["predict", "--config", c], dir.path());
    ok(&["eval", "--config", c], dir.path());

    let base = group_mse(&dir.path().join("base"), "test");
    let adapted = group_mse(&dir.path().join("runs/predictions"), "test");
    let zero_shot = group_mse(&dir.path().join("runs/predictions"), "zero-shot");
    eprintln!("test MSE x1e-2: base {base:.4}, adapted {adapted:.4}; zero-shot adapted {zero_shot:.4}");
    assert!(adapted < base);
    let svg = std::fs::read_dir(dir.path().join("runs/predictions"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svg, 48);
}
