use std::path::{Path, PathBuf};
use std::process::Command;

use cgap_cli::dispatch_to;

const CONFIG: &str = r#"
[model]
widths = [3, 4, 6]

[data]
train = "synth:classes=10,n=12,seed=5"
test = "synth:classes=10,n=4,seed=5,split=test"

[train]
epochs = 3
batch_size = 32
lr0 = 0.05

[growth]
f_growth = 1.0
tau_capa = 8

[prune]
tau_accu = 0.05
max_iterations = 1
"#;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cgap(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cgap").chain(args.iter().copied());
    let code = dispatch_to(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn train(dir: &Path, cfg: &Path, name: &str) -> (PathBuf, PathBuf) {
    let ckpt = dir.join(format!("{name}.ckpt"));
    let metrics = dir.join(format!("{name}.csv"));
    let r = cgap(&["train", "--config", s(cfg), "--out", s(&ckpt), "--metrics", s(&metrics)]);
    assert_eq!(r.code, 0, "{}", r.err);
    (ckpt, metrics)
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let (dir, cfg) = workspace();
    let (ckpt, metrics) = train(dir.path(), &cfg, "m");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "epoch,train_loss,train_acc,test_acc,params,flops,event");
    assert!(lines[1].ends_with(",grow"));
    assert!(ckpt.exists());

    let again = train(dir.path(), &cfg, "again");
    assert_eq!(std::fs::read(&metrics).unwrap(), std::fs::read(&again.1).unwrap());
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again.0).unwrap());
}

#[test]
fn resumed_training_matches_unbroken_run() {
    let (dir, cfg) = workspace();
    let (full_ckpt, full_metrics) = train(dir.path(), &cfg, "full");

    let half = dir.path().join("half.ckpt");
    let r = cgap(&["train", "--config", s(&cfg), "--out", s(&half), "--until", "1"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.lines().count(), 1);

    let resumed = dir.path().join("resumed.ckpt");
    let resumed_metrics = dir.path().join("resumed.csv");
    let r = cgap(&[
        "train",
        "--ckpt",
        s(&half),
        "--data",
        "synth:classes=10,n=12,seed=5",
        "--test-data",
        "synth:classes=10,n=4,seed=5,split=test",
        "--out",
        s(&resumed),
        "--metrics",
        s(&resumed_metrics),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(
        std::fs::read(&full_metrics).unwrap(),
        std::fs::read(&resumed_metrics).unwrap()
    );
    assert_eq!(std::fs::read(&full_ckpt).unwrap(), std::fs::read(&resumed).unwrap());
}

#[test]
fn eval_prints_four_decimals() {
    let (dir, cfg) = workspace();
    let (ckpt, _) = train(dir.path(), &cfg, "m");
    let r = cgap(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        "synth:classes=10,n=4,seed=5,split=test",
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let line = r.out.trim();
    assert_eq!(line.len(), 6, "{line}");
    let acc: f64 = line.parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn cost_report_and_comparison() {
    let (dir, cfg) = workspace();
    let (ckpt, _) = train(dir.path(), &cfg, "m");
    let hw = dir.path().join("hw.toml");
    std::fs::write(&hw, "[hardware]\nword_bits = 8\n").unwrap();

    let r = cgap(&["cost", "--ckpt", s(&ckpt), "--hw", s(&hw), "--json"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let report: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert!(report["total"]["dram_bytes"].as_u64().unwrap() > 0);

    let dense = dir.path().join("dense.ckpt");
    let seed_cfg = dir.path().join("seed.toml");
    std::fs::write(&seed_cfg, CONFIG.replace("epochs = 3", "epochs = 1")).unwrap();
    let r = cgap(&["train", "--config", s(&seed_cfg), "--out", s(&dense)]);
    assert_eq!(r.code, 0, "{}", r.err);

    let r = cgap(&[
        "cost",
        "--ckpt",
        s(&ckpt),
        "--hw",
        s(&hw),
        "--compare",
        s(&dense),
        "--json",
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let cmp: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(cmp["baseline"], s(&dense));
    let entries = cmp["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["delta_pct"]["flops"], 0.0);

    let r = cgap(&["cost", "--config", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.lines().last().unwrap().trim_start().starts_with("total"));
}

#[test]
fn heatmap_and_describe() {
    let (dir, cfg) = workspace();
    let (ckpt, _) = train(dir.path(), &cfg, "m");
    let r = cgap(&["heatmap", "--ckpt", s(&ckpt), "--layer", "0"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let rows: Vec<&str> = r.out.lines().collect();
    assert_eq!(rows.len(), 25);
    let units = rows[0].split(',').count();
    assert!(units >= 3);

    let out = dir.path().join("h.csv");
    let r = cgap(&["heatmap", "--ckpt", s(&ckpt), "--layer", "0", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 25);

    let r = cgap(&["heatmap", "--ckpt", s(&ckpt), "--layer", "1"]);
    assert_eq!(r.code, 1);

    let r = cgap(&["describe", "--config", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("widths: [3-4-6-10]"));
    assert!(r.out.contains("valid: yes"));
}

#[test]
fn failures_are_one_line() {
    let r = cgap(&["frobnicate"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.err.lines().count(), 1);

    let r = cgap(&["eval", "--ckpt", "x.ckpt", "--bogus"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.err.lines().count(), 1);

    let r = cgap(&["eval", "--ckpt", "/nonexistent/x.ckpt", "--data", "synth:n=1"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.err.lines().count(), 1);
    assert!(r.err.starts_with("error:"));

    let (dir, _) = workspace();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 1\n").unwrap();
    let r = cgap(&["train", "--config", s(&bad), "--out", s(&dir.path().join("o.ckpt"))]);
    assert_eq!(r.code, 1);
    assert_eq!(r.err.lines().count(), 1);

    let r = cgap(&["eval", "--ckpt", "x.ckpt", "--data", "cifar:train"]);
    assert_eq!(r.code, 1);

    let r = cgap(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.out.contains("train"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cgap");
    let out = Command::new(bin).arg("nope").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin)
        .args(["eval", "--ckpt", "/nonexistent.ckpt", "--data", "synth:n=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}
