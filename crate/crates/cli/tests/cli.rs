use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TASK: &str = r#"
[task]
source = "synth"
kind = "keyword"
train_size = 64
dev_size = 32
vocab_size = 16
seed = 0
"#;

const TRAIN: &str = r#"
[train]
total_steps = 8
batch_size = 8
eval_every = 4
seed = 0
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squeeze")).args(args).env("SQUEEZE_LOG", "error").output().unwrap()
}

fn write_configs(dir: &Path) {
    let teacher = format!(
        "out_dir = \"teacher\"\n{TASK}\n[teacher.model]\nnum_layers = 2\nhidden_size = 8\nnum_heads = 2\nvocab_size = 16\nmax_seq_len = 12\nnum_classes = 2\n{TRAIN}"
    );
    let ws = format!(
        "out_dir = \"ws\"\n{TASK}\n[teacher]\ncheckpoint = \"teacher/teacher.ckpt\"\n\n[student]\nnum_layers = 2\nhidden_size = 4\nnum_heads = 2\nvocab_size = 16\nmax_seq_len = 12\nnum_classes = 2\n\n[reparam]\nkind = \"ws\"\n\n[objective]\nkind = \"kd\"\nalpha = 0.5\ntemperature = 2.0\n{TRAIN}"
    );
    fs::write(dir.join("teacher.toml"), teacher).unwrap();
    fs::write(dir.join("ws.toml"), ws).unwrap();
}

fn strip_timing(report: &str) -> Vec<Value> {
    report
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_clock_ms");
            }
            v
        })
        .collect()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_passes() {
    let out = run(&["verify", "--seed", "3"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("[PASS]")).count() >= 8);
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn config_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[task]\nsource = \"synth\"\nkind = \"nope\"\n").unwrap();
    let out = run(&["train-teacher", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let missing = run(&["squeeze", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn teacher_then_squeeze_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_configs(dir.path());
    let cfg = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    ok(&run(&["train-teacher", "--config", &cfg("teacher.toml")]));
    let teacher = dir.path().join("teacher");
    for f in ["teacher.ckpt", "report.jsonl", "config.resolved.toml"] {
        assert!(teacher.join(f).exists(), "missing {f}");
    }
    let first_teacher = fs::read(teacher.join("teacher.ckpt")).unwrap();

    ok(&run(&["squeeze", "--config", &cfg("ws.toml")]));
    let ws = dir.path().join("ws");
    let ckpt = fs::read(ws.join("student.ckpt")).unwrap();
    let report = fs::read_to_string(ws.join("report.jsonl")).unwrap();

    // Same seed again, into a second directory.
    let again = dir.path().join("ws2");
    ok(&run(&["squeeze", "--config", &cfg("ws.toml"), "--out", again.to_str().unwrap()]));
    assert_eq!(fs::read(again.join("student.ckpt")).unwrap(), ckpt);
    assert_eq!(strip_timing(&fs::read_to_string(again.join("report.jsonl")).unwrap()), strip_timing(&report));

    ok(&run(&["train-teacher", "--config", &cfg("teacher.toml"), "--out", dir.path().join("t2").to_str().unwrap()]));
    assert_eq!(fs::read(dir.path().join("t2/teacher.ckpt")).unwrap(), first_teacher);

    let other = dir.path().join("ws3");
    ok(&run(&["squeeze", "--config", &cfg("ws.toml"), "--seed", "5", "--out", other.to_str().unwrap()]));
    assert_ne!(strip_timing(&fs::read_to_string(other.join("report.jsonl")).unwrap()), strip_timing(&report));
}
