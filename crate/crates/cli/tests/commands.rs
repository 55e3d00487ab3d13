use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lid_core::eval::MetricsReport;

const TOY: &str = "\
paths.data = data
paths.out = out
synth.num_phones = 10
synth.train_fragments = 40
synth.dev_fragments = 10
synth.test_fragments = 10
synth.kappa = 1e6
encoder.hidden_dim = 16
encoder.num_layers = 1
encoder.num_heads = 2
encoder.ffn_dim = 32
encoder.max_sequence_length = 40
head.rcnn_hidden = 16
head.rcnn_proj = 16
train.epochs = 150
train.learning_rate = 3e-3
train.batch_size = 8
train.patience = 50
";

fn lid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lid"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err_line(out: &Output) -> String {
    assert!(!out.status.success());
    let e = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(e.lines().count(), 1, "{e}");
    e.trim_end().to_string()
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
    ok(lid(dir.path(), &["synth", "--config", "toy.cfg"]));
    dir
}

#[test]
fn synth_writes_manifests_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(lid(dir.path(), &["synth", "--out", "a/b/c", "--set", "synth.train_fragments=30"]));
    assert_eq!(out.lines().count(), 3);
    for (split, n) in [("train", 30), ("dev", 50), ("test", 50)] {
        let text = fs::read_to_string(dir.path().join(format!("a/b/c/{split}.tsv"))).unwrap();
        assert_eq!(text.lines().count(), n + 1, "header plus one line per fragment");
    }
    assert!(dir.path().join("a/b/c/meta.json").exists());
}

#[test]
fn configuration_errors_are_reported_with_their_key() {
    let dir = tempfile::tempdir().unwrap();
    let e = err_line(&lid(dir.path(), &["synth", "--set", "synth.kappa=-1"]));
    assert!(e.starts_with("ERROR config:") && e.contains("synth.kappa"), "{e}");
    let e = err_line(&lid(dir.path(), &["synth", "--set", "synth.bogus=1"]));
    assert!(e.starts_with("ERROR config:") && e.contains("synth.bogus"), "{e}");
    let e = err_line(&lid(dir.path(), &["train", "--mode", "bert_everything"]));
    assert!(e.starts_with("ERROR usage:"), "{e}");
    let out = lid(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let e = err_line(&lid(dir.path(), &["train", "--config", "missing.cfg"]));
    assert!(e.starts_with("ERROR io:"), "{e}");
}

#[test]
fn train_eval_predict_and_resume() {
    let dir = toy_dir();
    let d = dir.path();
    let out = ok(lid(d, &["train", "--config", "toy.cfg"]));
    assert!(out.contains("trained"), "{out}");
    let history = fs::read_to_string(d.join("out/history.tsv")).unwrap();
    assert!(history.starts_with("step\tepoch\ttrain_loss\tdev_loss\tdev_accuracy\n"));

    ok(lid(d, &["eval", "--config", "toy.cfg"]));
    let report = MetricsReport::from_json(&fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report.n, 10);
    assert_eq!(report.accuracy, 1.0, "{report:?}");
    assert_eq!(report.f1_macro, 1.0);

    let line = ok(lid(
        d,
        &["predict", "--model", "out/model.safetensors", "--ppg", "data/ppg/test-u0001-f00.ppg", "--align", "data/align/test-u0001-f00.ali"],
    ));
    assert_eq!(line.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["id"], "test-u0001-f00");
    let probs: Vec<f64> = v["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert_eq!(v["label"], 1);

    let e = err_line(&lid(d, &["predict", "--model", "out/model.safetensors", "--ppg", "data/ppg/test-u0001-f00.ppg"]));
    assert!(e.starts_with("ERROR input:") && e.contains("--decode"), "{e}");
    ok(lid(d, &["predict", "--model", "out/model.safetensors", "--ppg", "data/ppg/test-u0001-f00.ppg", "--decode"]));

    let last_step = |h: &str| -> u64 { h.lines().last().unwrap().split('\t').next().unwrap().parse().unwrap() };
    let first_end = last_step(&history);
    ok(lid(
        d,
        &["train", "--config", "toy.cfg", "--resume", "out/model.safetensors", "--out", "resumed", "--set", "train.epochs=2"],
    ));
    let resumed = fs::read_to_string(d.join("resumed/history.tsv")).unwrap();
    let first_resumed: u64 = resumed.lines().nth(1).unwrap().split('\t').next().unwrap().parse().unwrap();
    assert!(first_resumed > first_end, "{first_resumed} after {first_end}");
}

#[test]
fn eval_rejects_a_different_inventory() {
    let dir = toy_dir();
    let d = dir.path();
    ok(lid(d, &["train", "--config", "toy.cfg", "--set", "train.epochs=1"]));
    ok(lid(d, &["synth", "--config", "toy.cfg", "--set", "synth.num_phones=12", "--out", "other"]));
    let e = err_line(&lid(d, &["eval", "--config", "toy.cfg", "--set", "paths.data=other"]));
    assert!(e.starts_with("ERROR config:") && e.contains("inventory"), "{e}");
}

#[test]
fn baseline_report_shares_the_eval_schema() {
    let dir = toy_dir();
    let d = dir.path();
    ok(lid(d, &["baseline", "--config", "toy.cfg", "--set", "baseline.n_max=2"]));
    let text = fs::read_to_string(d.join("out/baseline_report.json")).unwrap();
    let report = MetricsReport::from_json(&text).unwrap();
    assert_eq!(report.n, 10);
    let keys = |t: &str| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(t).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    ok(lid(d, &["train", "--config", "toy.cfg", "--set", "train.epochs=1"]));
    ok(lid(d, &["eval", "--config", "toy.cfg"]));
    assert_eq!(keys(&text), keys(&fs::read_to_string(d.join("out/report.json")).unwrap()));

    let model = fs::read_to_string(d.join("out/ngram.txt")).unwrap();
    assert!(model.lines().next().unwrap().contains("n_max=2"));
    let vocab: Vec<&str> = model
        .lines()
        .skip_while(|l| *l != "[vocab]")
        .skip(1)
        .take_while(|l| !l.starts_with('['))
        .collect();
    assert!(!vocab.is_empty());
    assert!(vocab.iter().all(|l| l.split(' ').count() - 1 <= 2), "{vocab:?}");
    assert!(vocab.iter().any(|l| l.split(' ').count() - 1 == 2));
}
