use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn autosam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autosam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = autosam(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_SPEC: &str = r#"{"num_users": 150, "num_items": 40, "num_clusters": 4, "min_len": 14, "max_len": 20}"#;
const TINY_CONFIG: &str = r#"{
    "epochs": 2,
    "batch_size": 16,
    "backbone": {"d": 8, "layers": 1, "heads": 2, "hidden": 16, "max_len": 12},
    "sampler": {"hidden": 16}
}"#;

fn synth(dir: &Path, seed: &str) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, TINY_SPEC).unwrap();
    let data = dir.join(format!("data{seed}"));
    ok(&["synth", "--spec", s(&spec), "--out", s(&data), "--seed", seed]);
    data
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "4");
    let b = dir.path().join("again");
    ok(&["synth", "--spec", s(&dir.path().join("spec.json")), "--out", s(&b), "--seed", "4"]);
    for f in ["sequences.bin", "labels.bin", "catalog.json", "meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = json(&a.join("run_manifest.json"));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["dataset_fingerprint"], json(&a.join("meta.json"))["fingerprint"]);
    assert!(m["finished_at"].is_u64());
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--seed", "2"]);
        let ev = dir.path().join(format!("eval-{run}"));
        ok(&["eval", "--checkpoint", s(&out.join("checkpoint")), "--data", s(&data), "--out", s(&ev)]);
        metrics.push(fs::read(ev.join("metrics.json")).unwrap());
        assert_eq!(fs::read_to_string(out.join("epochs.jsonl")).unwrap().lines().count(), 2);
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(
        fs::read(dir.path().join("a/checkpoint/tensors.bin")).unwrap(),
        fs::read(dir.path().join("b/checkpoint/tensors.bin")).unwrap()
    );
    let report: Value = serde_json::from_slice(&metrics[0]).unwrap();
    assert_eq!(report["strategy"], "auto");
    let recall = report["metrics"]["recall@10"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&recall));
    let manifest = json(&dir.path().join("a/run_manifest.json"));
    assert_eq!(manifest["config"]["epochs"], 2);
    assert_eq!(manifest["config"]["reward"]["gamma"], 0.9);
}

#[test]
fn full_strategy_and_multistep_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "5");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.path().join("full");
    ok(&[
        "train", "--config", s(&cfg), "--strategy", "full", "--split", "multistep", "--data", s(&data), "--out",
        s(&out),
    ]);
    let ev = dir.path().join("ev");
    let res = ok(&[
        "eval", "--checkpoint", s(&out.join("checkpoint")), "--data", s(&data), "--out", s(&ev), "--mode",
        "multistep", "--steps", "1..5",
    ]);
    let table = String::from_utf8(res.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6, "{table}");
    assert!(lines[0].starts_with("steps,strategy"));
    assert!(lines[1].starts_with("1,full,"));
    assert!(lines[5].starts_with("5,full,"));
}

#[test]
fn preset_materializes_the_benchmark_settings() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let out = dir.path().join("dry");
    ok(&["train", "--preset", "paper-tmall", "--data", s(&data), "--out", s(&out), "--dry-run"]);
    let cfg = &json(&out.join("run_manifest.json"))["config"];
    let r = &cfg["reward"];
    assert_eq!(
        (r["tau"].as_f64(), r["relax"].as_f64(), r["scale"].as_f64(), r["lambda"].as_f64(), r["psi0"].as_f64()),
        (Some(5.0), Some(1.0), Some(2e-3), Some(0.5), Some(0.8))
    );
    assert!(!out.join("checkpoint").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let out = dir.path().join("x");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"lr_srs": -1, "reward": {"lambda": 3}}"#).unwrap();
    let r = autosam(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("lr_srs") && msg.contains("lambda"), "{msg}");

    let r = autosam(&["train", "--preset", "paper-netflix", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let r = autosam(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing"));

    let r = autosam(&["preprocess", "--input", s(&dir.path().join("nope.tsv")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.tsv"));
}

#[test]
fn preprocess_reports_removals_and_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("log.tsv");
    let mut rows = String::from("user\titem\ttime\n");
    // Users 1..=4 share items 1..=3 three times each; user 9 and item 99 are rare.
    for u in 1..=4 {
        for rep in 0..3 {
            for i in 1..=3 {
                rows.push_str(&format!("{u}\t{i}\t{}\n", rep * 10 + i));
            }
        }
    }
    rows.push_str("9\t1\t5\n4\t99\t100\n");
    fs::write(&tsv, rows).unwrap();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let res = ok(&["preprocess", "--input", s(&tsv), "--min-count", "3", "--out", s(&out)]);
        let stats: Value = serde_json::from_slice(&res.stdout).unwrap();
        assert_eq!(stats["users"], 4);
        assert_eq!(stats["items"], 3);
        assert_eq!(stats["filter"]["removed_users"], 1);
        assert_eq!(stats["filter"]["removed_items"], 1);
        assert_eq!(stats["filter"]["removed_interactions"], 2);
        hashes.push(json(&out.join("run_manifest.json"))["dataset_fingerprint"].clone());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn flops_without_sampling_saves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let r = ok(&[
        "flops", "--strategy", "full", "--mu", "1", "--num-items", "500", "--seq-len", "50", "--out", s(&out),
    ]);
    let e: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(e["savings_ratio"], 0.0);
    assert_eq!(e["srs_mflops"], e["full_mflops"]);
    let half = ok(&["flops", "--mu", "0.5", "--num-items", "500", "--seq-len", "50", "--out", s(&out)]);
    let h: Value = serde_json::from_slice(&half.stdout).unwrap();
    assert_eq!(h["quadratic_ratio"], 0.25);
    assert!(h["sampler_mflops"].as_f64().unwrap() > 0.0);
    let r = autosam(&["flops", "--mu", "1.5", "--num-items", "500", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn analysis_and_sweep_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--data", s(&data), "--out", s(&run)]);
    let an = dir.path().join("an");
    ok(&["analyze-sampler", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data), "--out", s(&an)]);
    let q = json(&an.join("sampler_quality.json"));
    let auc = q["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let sw = dir.path().join("sw");
    let res = ok(&[
        "sweep-b", "--config", s(&cfg), "--epochs", "1", "--b-list", "-0.5,2", "--data", s(&data), "--out", s(&sw),
    ]);
    let csv = String::from_utf8(res.stdout).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("-0.5,"));
}
