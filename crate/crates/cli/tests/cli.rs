//! The `moetune` binary end to end on the committed fixtures.

mod support;

use support::*;

const SUBCOMMANDS: [&str; 7] = ["prepare-data", "stats", "train", "eval", "chat", "merge-lora", "quantize"];

#[test]
fn help_and_usage_errors() {
    ok(&["--help"]);
    ok(&["--version"]);
    for sub in SUBCOMMANDS {
        let o = ok(&[sub, "--help"]);
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    expect_code(&["frobnicate"], 2);
    expect_code(&[], 2);
    expect_code(&["train", "--no-such-flag"], 2);
    expect_code(&["prepare-data", "--out", "x.jsonl"], 2);
}

#[test]
fn prepare_data_reports_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let o = ok(&[
        "prepare-data",
        "--alpaca",
        s(&raw("alpaca_data_zh.json")),
        "--alpaca-gpt4",
        s(&raw("alpaca_gpt4_data_zh.json")),
        "--sharegpt",
        s(&raw("sharegpt_zh.json")),
        "--no-length-filter",
        "--out",
        s(&out),
    ]);
    assert!(stderr(&o).contains("total ingested: 32 (28 single-round, 4 multi-round)"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.stats.json")).unwrap()).unwrap();
    assert_eq!(report["sources"]["alpaca_zh"]["ingested"], 12);
    assert_eq!(report["sources"]["alpaca_gpt4_zh"]["ingested"], 9);
    assert_eq!(report["sources"]["sharegpt"]["ingested"], 11);
    assert_eq!(report["ingested"]["total"], 32);
    assert_eq!(report["corpus"]["total"], 30);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 30);

    let stats = ok(&["stats", "--data", s(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["total"], 30);
}

#[test]
fn strict_and_lenient_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let broken = raw("sharegpt_broken.json");
    let o = expect_code(&["prepare-data", "--sharegpt", s(&broken), "--out", s(&out)], 1);
    assert!(stderr(&o).contains("record 1"), "{}", stderr(&o));
    let o = ok(&["prepare-data", "--sharegpt", s(&broken), "--lenient", "--out", s(&out)]);
    assert!(stderr(&o).contains("1 skipped"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

fn train_args<'a>(corpus: &'a str, out: &'a str, cfg: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec!["train", "--data", corpus, "--out-dir", out, "--model-config", cfg, "--max-steps", steps]
}

#[test]
fn train_echoes_defaults_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = prepare_fixture_corpus(dir.path());
    let cfg = write_tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = ok(&train_args(s(&corpus), s(&a), s(&cfg), "3"));
    let err = stderr(&o);
    assert!(
        err.contains("config: epochs=3 lr=0.00005 save_every=1000 batch_size=8 grad_accum=1 seed=0 lora_rank=4 quant=on"),
        "{err}"
    );
    assert!(err.contains("\"n_experts\":4"));
    ok(&train_args(s(&corpus), s(&b), s(&cfg), "3"));
    let log = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert_eq!(log, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("final.aurc")).unwrap(), std::fs::read(b.join("final.aurc")).unwrap());
}

#[test]
fn resume_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = prepare_fixture_corpus(dir.path());
    let cfg = write_tiny_config(dir.path());
    let (split, whole) = (dir.path().join("split"), dir.path().join("whole"));
    let fast = ["--lr", "1e-3", "--batch-size", "4"];
    let mut args = train_args(s(&corpus), s(&whole), s(&cfg), "6");
    args.extend(fast);
    ok(&args);
    let mut args = train_args(s(&corpus), s(&split), s(&cfg), "3");
    args.extend(fast);
    ok(&args);
    let ck = split.join("final.aurc");
    let mut args = vec!["train", "--data", s(&corpus), "--out-dir", s(&split), "--resume", s(&ck)];
    args.extend(["--max-steps", "6"]);
    ok(&args);
    assert_eq!(
        std::fs::read_to_string(split.join("loss.csv")).unwrap(),
        std::fs::read_to_string(whole.join("loss.csv")).unwrap()
    );
}

#[test]
fn quantization_shrinks_projection_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = prepare_fixture_corpus(dir.path());
    let cfg = write_tiny_config(dir.path());
    let (on_dir, off_dir) = (dir.path().join("on"), dir.path().join("off"));
    let on = ok(&train_args(s(&corpus), s(&on_dir), s(&cfg), "1"));
    let mut args = train_args(s(&corpus), s(&off_dir), s(&cfg), "1");
    args.extend(["--quant", "off"]);
    let off = ok(&args);
    let (q, f) = (stderr_number(&on, "projection bytes:"), stderr_number(&off, "projection bytes:"));
    // 4-bit codes plus one f32 scale per 64 weights against f32 weights.
    let weights = f / 4;
    assert_eq!(q, weights.div_ceil(2) + 4 * weights.div_ceil(64));
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = prepare_fixture_corpus(dir.path());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"d_modle": 8}}"#).unwrap();
    let out = dir.path().join("o");
    expect_code(&train_args(s(&corpus), s(&out), s(&bad), "1"), 2);
    let cfg = write_tiny_config(dir.path());
    let mut args = train_args(s(&corpus), s(&out), s(&cfg), "1");
    args.extend(["--epochs", "0"]);
    expect_code(&args, 2);
}

fn eval_json(args: &[&str]) -> serde_json::Value {
    let o = ok(args);
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn eval_with_oracle_stub_is_perfect_and_schema_valid() {
    let validator = jsonschema::validator_for(&schema()).unwrap();
    let report = eval_json(&["eval", "--model", "oracle:", "--benchmark", "ceval", "--data-dir", s(&bench_dir())]);
    assert!(validator.is_valid(&report));
    assert_eq!(report["micro_accuracy"], 1.0);
    assert_eq!(report["total"], 30);

    let zero = eval_json(&[
        "eval", "--model", "random:3", "--benchmark", "mmlu", "--data-dir", s(&bench_dir()), "--shots", "0",
        "--subjects", "art_studies,computer_network",
    ]);
    assert!(validator.is_valid(&zero));
    assert_eq!(zero["k_shot"], 0);
    assert_eq!(zero["language"], "en");
    assert_eq!(zero["total"], 20);
}

#[test]
fn chat_merge_and_quantize_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = prepare_fixture_corpus(dir.path());
    let cfg = write_tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    ok(&train_args(s(&corpus), s(&run_dir), s(&cfg), "2"));
    let ck = run_dir.join("final.aurc");

    let dump = dir.path().join("prompts.jsonl");
    let o = run_with_stdin(
        &["chat", "--model", s(&ck), "--greedy", "--max-new", "16", "--dump-prompt", s(&dump)],
        "你好\n再见\n/reset\n你好\n/exit\nignored\n",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let prompts: Vec<serde_json::Value> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(prompts.len(), 3);
    let text = |i: usize| prompts[i]["prompt"].as_str().unwrap().to_string();
    assert!(text(1).starts_with(&text(0)));
    assert_eq!(text(2), text(0));
    assert!(stdout(&o).matches('\n').count() >= 3);

    expect_code(&["chat", "--model", s(&ck), "--max-new", "256"], 2);

    let merged = dir.path().join("merged.aurc");
    ok(&["merge-lora", "--model", s(&ck), "--out", s(&merged)]);
    expect_code(&["merge-lora", "--model", s(&merged), "--out", s(&dir.path().join("again.aurc"))], 2);
    let q = dir.path().join("q.aurc");
    let o = ok(&["quantize", "--model", s(&merged), "--out", s(&q), "--block-size", "32"]);
    assert!(stderr(&o).contains("projection bytes"));
    let report = eval_json(&[
        "eval", "--model", s(&q), "--benchmark", "ceval", "--data-dir", s(&bench_dir()), "--shots", "0",
    ]);
    assert!(jsonschema::validator_for(&schema()).unwrap().is_valid(&report));
}
