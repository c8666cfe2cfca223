//! The `efgd` binary: artifacts, overrides, exit codes and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use efgd::costmodel::CostSummary;
use efgd::run::EvalResult;
use serde_json::{json, Value};

fn config(mode: &str, prune: bool, epochs: usize) -> Value {
    json!({
        "network": {
            "input": [1, 4, 4],
            "layers": [
                { "kind": "linear", "out_features": 24 },
                { "kind": "relu" },
                { "kind": "linear", "out_features": 12 },
                { "kind": "relu" },
                { "kind": "linear", "out_features": 3 },
                { "kind": "softmax_cross_entropy" }
            ]
        },
        "train": {
            "batch_size": 16,
            "epochs": epochs,
            "lr": 0.05,
            "momentum": 0.9,
            "feedback": { "mode": mode },
            "prune": { "enabled": prune, "rate": 0.7 },
            "seed": 11,
            "histogram_bins": 8
        },
        "data": { "kind": "blobs", "classes": 3, "samples": 192, "val_samples": 48, "shape": [1, 4, 4] },
        "checkpoint_every": 1
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn efgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efgd")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("signsym", true, 2));
    let run = tmp.path().join("run");
    ok(&efgd(&["train", "--config", s(&cfg), "--out-dir", s(&run)]));

    for f in [
        "config.resolved.json",
        "metrics.jsonl",
        "angles.csv",
        "prune_stats.json",
        "cost.json",
        "run_meta.json",
        "checkpoints/final.ckpt",
        "checkpoints/epoch_001.ckpt",
        "checkpoints/epoch_002.ckpt",
        "hist_0_1.csv",
        "hist_2_2.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, m) in lines.iter().enumerate() {
        assert_eq!(m["epoch"], json!(i + 1));
        for k in ["train_loss", "train_acc", "val_acc", "angles", "sparsity", "cost"] {
            assert!(!m[k].is_null(), "metrics lack {k}");
        }
        assert!(m["wall_s"].is_null());
    }

    let angles = fs::read_to_string(run.join("angles.csv")).unwrap();
    assert_eq!(angles.lines().next(), Some("epoch,step,layer,angle_deg"));
    let hist = fs::read_to_string(run.join("hist_0_1.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_lo,bin_hi,count"));
    assert_eq!(hist.lines().count(), 1 + 8 + 2);

    let stats: Value = serde_json::from_str(&fs::read_to_string(run.join("prune_stats.json")).unwrap()).unwrap();
    let pruned: Vec<&String> = stats.as_object().unwrap().keys().collect();
    assert_eq!(pruned, ["0", "2"], "the top weighted layer is never pruned");

    let cost: CostSummary = serde_json::from_str(&fs::read_to_string(run.join("cost.json")).unwrap()).unwrap();
    assert!(cost.ratios.mac_speedup > 1.0);
}

#[test]
fn seed_override_lands_in_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("bp", false, 1));
    let run = tmp.path().join("run");
    ok(&efgd(&["train", "--config", s(&cfg), "--out-dir", s(&run), "--seed", "4242", "--subset", "96"]));
    let resolved: Value = serde_json::from_str(&fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], json!(4242));
    assert_eq!(resolved["data"]["samples"], json!(96));
    assert_eq!(resolved["out_dir"], json!(s(&run)));
}

#[test]
fn configuration_problems_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = efgd(&["train", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let mut bad = config("bp", false, 1);
    bad["train"]["lr"] = json!(-1.0);
    let cfg = write_config(tmp.path(), &bad);
    assert_eq!(efgd(&["train", "--config", s(&cfg)]).status.code(), Some(2));

    let mut unknown = config("bp", false, 1);
    unknown["train"]["learning_rate"] = json!(0.1);
    let cfg = write_config(tmp.path(), &unknown);
    assert_eq!(efgd(&["train", "--config", s(&cfg)]).status.code(), Some(2));

    let cfg = write_config(tmp.path(), &config("bp", false, 1));
    let out = efgd(&["compare", "--config", s(&cfg), "--modes", "bp,backprop"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backprop"));
}

#[test]
fn divergence_exits_with_3_and_keeps_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config("bp", false, 3);
    cfg["train"]["lr"] = json!(1e30);
    cfg["train"]["momentum"] = json!(0.0);
    let cfg = write_config(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    let out = efgd(&["train", "--config", s(&cfg), "--out-dir", s(&run)]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(run.join("config.resolved.json").is_file());
}

#[test]
fn compare_tabulates_each_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("bp", false, 2));
    let run = tmp.path().join("cmp");
    let stdout = ok(&efgd(&["compare", "--config", s(&cfg), "--out-dir", s(&run), "--modes", "bp,signsym_prune"]));
    let csv = fs::read_to_string(run.join("compare.csv")).unwrap();
    assert_eq!(stdout, csv);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,bp,signsym_prune");
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        assert_eq!(r.split(',').count(), 3);
    }
    assert!(run.join("bp/metrics.jsonl").is_file());
    assert!(run.join("signsym_prune/metrics.jsonl").is_file());
}

fn cost(dir: &Path, cfg: &Value, extra: &[&str]) -> CostSummary {
    let p = write_config(dir, cfg);
    let out_dir = dir.join("cost");
    let mut args = vec!["cost", "--config", s(&p), "--out-dir", s(&out_dir)];
    args.extend_from_slice(extra);
    let stdout = ok(&efgd(&args));
    let summary: CostSummary = serde_json::from_str(&stdout).unwrap();
    let on_disk: CostSummary = serde_json::from_str(&fs::read_to_string(out_dir.join("cost.json")).unwrap()).unwrap();
    assert_eq!(summary, on_disk);
    summary
}

#[test]
fn cost_command_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let bp = cost(tmp.path(), &config("bp", false, 1), &[]).ratios;
    assert_eq!(
        (bp.mac_speedup, bp.traffic_reduction, bp.phase2_traffic_reduction, bp.energy_ratio),
        (1.0, 1.0, 1.0, 1.0)
    );

    let mut unpruned = config("signsym", true, 1);
    unpruned["train"]["prune"]["rate"] = json!(0.0);
    let r0 = cost(tmp.path(), &unpruned, &[]).ratios;
    assert_eq!(r0.mac_speedup, 1.0);
    assert!(r0.traffic_reduction > 1.0 && r0.phase2_traffic_reduction > 1.0);

    let rate = |p: f64| {
        let mut c = config("signsym", true, 1);
        c["train"]["prune"]["rate"] = json!(p);
        cost(tmp.path(), &c, &[]).ratios
    };
    let (r5, r9) = (rate(0.5), rate(0.9));
    assert!(r9.mac_speedup >= r5.mac_speedup && r5.mac_speedup > 1.0);
    assert!(r9.traffic_reduction >= r5.traffic_reduction);
    assert!(r9.energy_ratio <= r5.energy_ratio && r5.energy_ratio < 1.0);
}

#[test]
fn cost_from_run_uses_measured_sparsity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("signsym", true, 1);
    let p = write_config(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    ok(&efgd(&["train", "--config", s(&p), "--out-dir", s(&run)]));
    let measured = cost(tmp.path(), &cfg, &["--from-run", s(&run)]);
    let stats: Value = serde_json::from_str(&fs::read_to_string(run.join("prune_stats.json")).unwrap()).unwrap();
    for l in &measured.mode.layers {
        let want = stats[l.shape.layer.to_string()]["realized_zero_fraction"].as_f64().unwrap_or(0.0);
        assert_eq!(l.zero_fraction, want);
    }
    let from_training: CostSummary = serde_json::from_str(&fs::read_to_string(run.join("cost.json")).unwrap()).unwrap();
    assert_eq!(measured, from_training);
}

#[test]
fn eval_reproduces_final_validation_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("signsym", true, 2));
    let run = tmp.path().join("run");
    ok(&efgd(&["train", "--config", s(&cfg), "--out-dir", s(&run)]));
    let last: Value =
        serde_json::from_str(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().last().unwrap()).unwrap();

    let ckpt = run.join("checkpoints/final.ckpt");
    let r: EvalResult = {
        let out = ok(&efgd(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
        let v: Value = serde_json::from_str(&out).unwrap();
        EvalResult {
            loss: v["loss"].as_f64().unwrap(),
            accuracy: v["accuracy"].as_f64().unwrap(),
            samples: v["samples"].as_u64().unwrap() as usize,
        }
    };
    assert_eq!(r.samples, 48);
    assert_eq!(r.accuracy, last["val_acc"].as_f64().unwrap());
}

#[test]
fn eval_rejects_missing_and_corrupt_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("bp", false, 1));
    let missing = tmp.path().join("none.ckpt");
    assert_eq!(efgd(&["eval", "--config", s(&cfg), "--checkpoint", s(&missing)]).status.code(), Some(2));

    let run = tmp.path().join("run");
    ok(&efgd(&["train", "--config", s(&cfg), "--out-dir", s(&run)]));
    let mut bytes = fs::read(run.join("checkpoints/final.ckpt")).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = efgd(&["eval", "--config", s(&cfg), "--checkpoint", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

fn train_files(cfg: &Path, run: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    ok(&efgd(&["train", "--config", s(cfg), "--out-dir", s(run), "--threads", threads]));
    let mut names =
        vec!["metrics.jsonl", "angles.csv", "prune_stats.json", "cost.json", "hist_0_1.csv", "checkpoints/final.ckpt"];
    names.sort();
    names.into_iter().map(|n| (n.to_string(), fs::read(run.join(n)).unwrap())).collect()
}

#[test]
fn runs_are_byte_identical_across_threads_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("signsym", true, 2));
    let one = train_files(&cfg, &tmp.path().join("t1"), "1");
    let four = train_files(&cfg, &tmp.path().join("t4"), "4");
    for ((name, a), (_, b)) in one.iter().zip(&four) {
        assert!(a == b, "{name} differs between 1 and 4 threads");
    }

    let resolved = tmp.path().join("t1/config.resolved.json");
    let replay = train_files(&resolved, &tmp.path().join("replay"), "2");
    for ((name, a), (_, b)) in one.iter().zip(&replay) {
        assert!(a == b, "{name} differs on replay");
    }
}

#[test]
fn commands_write_only_inside_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config("signsym", true, 1));
    let work = tmp.path().join("work");
    fs::create_dir(&work).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_efgd")).args(args).current_dir(&work).output().unwrap();
        ok(&out);
    };
    run(&["train", "--config", s(&cfg), "--out-dir", "r"]);
    run(&["compare", "--config", s(&cfg), "--out-dir", "c", "--modes", "bp"]);
    run(&["cost", "--config", s(&cfg), "--out-dir", "k"]);
    run(&["eval", "--config", s(&cfg), "--out-dir", "e", "--checkpoint", "r/checkpoints/final.ckpt"]);

    let mut entries: Vec<String> =
        fs::read_dir(&work).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    entries.sort();
    assert_eq!(entries, ["c", "k", "r"]);
    let mut top: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["config.json", "work"]);
}
