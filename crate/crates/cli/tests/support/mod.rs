//! Helpers for driving the `moetune` binary.
#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn raw(name: &str) -> PathBuf {
    fixtures().join("raw").join(name)
}

pub fn bench_dir() -> PathBuf {
    fixtures().join("bench")
}

pub fn schema() -> serde_json::Value {
    serde_json::from_str(moetune::eval::REPORT_SCHEMA).unwrap()
}

pub fn run(args: &[&str]) -> Output {
    run_with_stdin(args, "")
}

pub fn run_with_stdin(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_moetune"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn moetune");
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Runs and panics with the captured stderr unless the exit code is `code`.
pub fn expect_code(args: &[&str], code: i32) -> Output {
    let o = run(args);
    assert_eq!(o.status.code(), Some(code), "moetune {args:?}\n{}", stderr(&o));
    o
}

pub fn ok(args: &[&str]) -> Output {
    expect_code(args, 0)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small model and adapter settings for quick runs.
pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "model": {
            "n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64,
            "n_experts": 4, "top_k": 2, "max_seq_len": 256
        },
        "lora": { "rank": 4 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

/// `prepare-data` over all three fixture sources into `dir/corpus.jsonl`.
pub fn prepare_fixture_corpus(dir: &Path) -> PathBuf {
    let out = dir.join("corpus.jsonl");
    ok(&[
        "prepare-data",
        "--alpaca",
        s(&raw("alpaca_data_zh.json")),
        "--alpaca-gpt4",
        s(&raw("alpaca_gpt4_data_zh.json")),
        "--sharegpt",
        s(&raw("sharegpt_zh.json")),
        "--max-seq-len",
        "255",
        "--out",
        s(&out),
    ]);
    out
}

/// Value after `label` on the first stderr line that contains it.
pub fn stderr_number(o: &Output, label: &str) -> u64 {
    let text = stderr(o);
    let line = text.lines().find(|l| l.contains(label)).unwrap_or_else(|| panic!("no {label:?} in\n{text}"));
    let rest = &line[line.find(label).unwrap() + label.len()..];
    rest.trim().split(|c: char| !c.is_ascii_digit()).next().unwrap().parse().unwrap()
}
