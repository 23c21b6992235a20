use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"{
  "backbone": { "image_size": 8, "patch_size": 4, "in_channels": 1, "dim": 16, "depth": 2, "heads": 2, "num_classes": 2 },
  "plan": { "method": "gmoe-adapter", "hyper": { "bottleneck": 4 } },
  "data": { "synthetic": {
    "domain_tag": "mixed", "num_classes": 2, "image_size": 8, "class_mean_scale": 4.0, "noise_std": 0.5,
    "patient_count": 40, "per_patient_shift_std": 0.1, "seed": 7, "samples": 200 } },
  "train": { "steps": 30, "batch_size": 16, "learning_rate": 0.003, "seed": 1, "eval_every": 10 },
  "pretrain": { "steps": 30, "batch_size": 16, "learning_rate": 0.003, "seed": 1 },
  "split": { "seen_patients": 32, "unseen_patients": 8, "seed": 3 }
}"#;

fn vpl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpl")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = vpl(dir, args);
    assert!(o.status.success(), "vpl {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    vpl(dir, args).status.code().unwrap()
}

/// Temp dir holding `c.json` and two pretrained experts.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
    ok(dir.path(), &["pretrain", "--domain", "general", "--config", "c.json", "--out", "g.ckpt"]);
    ok(dir.path(), &["pretrain", "--domain", "medical", "--config", "c.json", "--out", "m.ckpt"]);
    dir
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn adapt_writes_results_history_and_gates() {
    let ws = workspace();
    let d = ws.path();
    ok(
        d,
        &[
            "adapt",
            "--method",
            "gmoe-adapter",
            "--backbone",
            "g.ckpt",
            "--backbone2",
            "m.ckpt",
            "--config",
            "c.json",
            "--out",
            "a.ckpt",
        ],
    );
    let results = read(d, "a.results.csv");
    assert_eq!(results.lines().next().unwrap(), "method,total_params_multiplier,dataset,split,accuracy,auroc,seed");
    assert!(results.lines().skip(1).all(|l| l.starts_with("gmoe-adapter,")), "{results}");
    assert_eq!(read(d, "a.gates.csv").lines().next().unwrap(), "gate,mean,min,max");
    assert!(read(d, "a.results.md").contains("gate summary"));

    ok(d, &["adapt", "--method", "linear", "--backbone", "g.ckpt", "--config", "c.json", "--out", "l.ckpt"]);
    assert!(!d.join("l.gates.csv").exists());
    let history = read(d, "l.history.csv");
    let mut lines = history.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,frozen_hash");
    let hashes: Vec<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(hashes.len() >= 3, "{history}");
    assert!(hashes.iter().all(|h| *h == hashes[0]), "frozen hash moved: {history}");
}

#[test]
fn eval_over_seeds_appends_mean_row() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["adapt", "--method", "adapter", "--backbone", "g.ckpt", "--config", "c.json", "--out", "a.ckpt"]);
    ok(d, &["synth", "--config", "c.json", "--out", "data.csv"]);
    assert!(d.join("data.synth.json").exists());
    let out = ok(
        d,
        &["eval", "--model", "a.ckpt", "--data", "data.csv", "--config", "c.json", "--seeds", "3", "--out", "e.csv"],
    );
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 5, "{out}");
    assert!(rows[4].ends_with(",mean"), "{out}");
    assert_eq!(read(d, "e.csv"), out);
}

#[test]
fn exit_codes() {
    let ws = workspace();
    let d = ws.path();
    // usage and configuration problems
    assert_eq!(
        code(d, &["adapt", "--method", "gmoe-adapter", "--backbone", "g.ckpt", "--config", "c.json", "--out", "x"]),
        2
    );
    assert_eq!(code(d, &["adapt", "--method", "nope", "--backbone", "g.ckpt", "--config", "c.json", "--out", "x"]), 2);
    assert_eq!(code(d, &["pretrain", "--config", "c.json", "--out", "x"]), 2);
    assert_eq!(code(d, &["params", "--method", "all", "--tasks", "0"]), 2);
    assert_eq!(code(d, &["ood", "--mode", "4", "--config", "c.json"]), 2);
    std::fs::write(d.join("bad.json"), r#"{"backbone": {}, "extra": 1}"#).unwrap();
    assert_eq!(code(d, &["synth", "--config", "bad.json", "--out", "x.csv"]), 2);
    // runtime failures
    assert_eq!(
        code(d, &["adapt", "--method", "linear", "--backbone", "missing.ckpt", "--config", "c.json", "--out", "x"]),
        1
    );
    assert_eq!(code(d, &["gradcheck", "--method", "adapter", "--inject-fault"]), 1);
    assert_eq!(code(d, &["gradcheck", "--method", "adapter"]), 0);
}

#[test]
fn params_lists_every_method_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["params", "--method", "all", "--tasks", "19"]);
    let sorted = out.lines().find_map(|l| l.strip_prefix("sorted: ")).unwrap();
    let order: Vec<&str> = sorted.split(" <= ").collect();
    assert_eq!(order.len(), 11);
    assert_eq!(order.first(), Some(&"linear"));
    assert_eq!(order.last(), Some(&"full"));
}

#[test]
fn schema_command_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["schema"])).unwrap();
    assert_eq!(v["additionalProperties"], false);
    assert!(v["properties"]["backbone"].is_object());
}
