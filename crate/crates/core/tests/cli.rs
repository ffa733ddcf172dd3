use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use insincere::cli::{run_cli_with, CONFIG_ENV};
use insincere::data::{synthetic_questions, write_dataset};
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("insincere").chain(args.iter().copied());
    let code = run_cli_with(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn records(out: &str) -> Vec<Value> {
    out.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let (examples, vocab) = synthetic_questions(80, 0.25, 3).unwrap();
    let data = dir.path().join("data.csv");
    let vocab_path = dir.path().join("vocab.txt");
    write_dataset(&data, &examples).unwrap();
    fs::write(&vocab_path, vocab.to_text()).unwrap();
    (dir, data, vocab_path)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = ["--max-len", "12", "--hidden", "8", "--heads", "2", "--ff-size", "16", "--epochs", "1"];

#[test]
fn missing_required_flag_is_a_usage_error() {
    let (_d, _, vocab) = workspace();
    let r = run(&["train", "--vocab", s(&vocab)]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("--data"), "{}", r.err);
    assert!(r.out.is_empty());
}

#[test]
fn unknown_subcommand_and_bad_values_exit_two() {
    assert_eq!(run(&["frobnicate"]).code, 2);
    let (_d, data, vocab) = workspace();
    let r = run(&["train", "--data", s(&data), "--vocab", s(&vocab), "--variant", "gpt"]);
    assert_eq!(r.code, 2, "{}", r.err);
}

#[test]
fn unreadable_input_is_a_runtime_error() {
    let (d, _, vocab) = workspace();
    let missing = d.path().join("nope.csv");
    let r = run(&["train", "--data", s(&missing), "--vocab", s(&vocab)]);
    assert_eq!(r.code, 1, "{}", r.err);
}

#[test]
fn tokenize_prints_wordpieces() {
    let (_d, _, vocab) = workspace();
    let r = run(&["tokenize", "--vocab", s(&vocab), "--text", "Why zorblax?", "--max-len", "8"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let rec = &records(&r.out)[0];
    assert_eq!(rec["record"], "tokens");
    let tokens: Vec<&str> = rec["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(tokens.first(), Some(&"[CLS]"));
    assert_eq!(tokens.last(), Some(&"[SEP]"));
    assert!(tokens.contains(&"zorblax"));
    assert_eq!(rec["ids"].as_array().unwrap().len(), 8);
}

#[test]
fn train_then_eval_reports_metrics() {
    let (d, data, vocab) = workspace();
    let ckpt = d.path().join("m.ckpt");
    let mut args = vec!["train", "--data", s(&data), "--vocab", s(&vocab), "--checkpoint-out", s(&ckpt)];
    args.extend(SMALL);
    let r = run(&args);
    assert_eq!(r.code, 0, "{}", r.err);
    let recs = records(&r.out);
    assert_eq!(recs[0]["record"], "header");
    assert!(recs.iter().any(|v| v["record"] == "epoch"));
    assert!(ckpt.exists());

    let r = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let m = records(&r.out).into_iter().find(|v| v["record"] == "metrics").unwrap();
    for key in ["accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    let a = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn settings_file_fills_gaps_and_flags_win() {
    let (d, data, vocab) = workspace();
    let cfg = d.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# shared settings\ndata = {}\nvocab = {}\nmax_len = 12\nhidden = 8\nheads = 2\nff-size = 16\nepochs = 1\nlr = 0.5\n",
            s(&data),
            s(&vocab)
        ),
    )
    .unwrap();
    let r = run(&["train", "--config", s(&cfg), "--lr", "0.001", "--seed", "9"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let header = &records(&r.out)[0];
    assert_eq!(header["settings"]["lr"], 0.001);
    assert_eq!(header["settings"]["max-len"], 12);
    assert_eq!(header["seed"], 9);
}

#[test]
fn settings_file_from_environment() {
    let (d, _, vocab) = workspace();
    let cfg = d.path().join("env.conf");
    fs::write(&cfg, format!("vocab = {}\nmax_len = 6\n", s(&vocab))).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_insincere"))
        .args(["tokenize", "--text", "how"])
        .env(CONFIG_ENV, &cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = &records(&String::from_utf8(out.stdout).unwrap())[0];
    assert_eq!(rec["ids"].as_array().unwrap().len(), 6);

    let out = Command::new(env!("CARGO_BIN_EXE_insincere"))
        .args(["tokenize"])
        .env(CONFIG_ENV, &cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_flag_writes_records_to_file() {
    let (d, _, vocab) = workspace();
    let dest = d.path().join("out.jsonl");
    let r = run(&["tokenize", "--vocab", s(&vocab), "--text", "what", "--output", s(&dest)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.is_empty());
    assert_eq!(records(&fs::read_to_string(dest).unwrap())[0]["record"], "tokens");
}

#[test]
fn compare_table_lists_each_model() {
    let (d, data, vocab) = workspace();
    let ckpt = d.path().join("m.ckpt");
    let mut args = vec!["train", "--data", s(&data), "--vocab", s(&vocab), "--checkpoint-out", s(&ckpt)];
    args.extend(SMALL);
    assert_eq!(run(&args).code, 0);
    let a = format!("first={}", s(&ckpt));
    let b = format!("second={}", s(&ckpt));
    let r = run(&["compare", "--model", &a, "--model", &b, "--data", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    assert!(lines[0].starts_with("# compare"));
    assert!(lines.iter().any(|l| l.starts_with("first")));
    assert!(lines.iter().any(|l| l.starts_with("second")));
    let bad = run(&["compare", "--model", "nameless", "--data", s(&data)]);
    assert_eq!(bad.code, 2);
}
