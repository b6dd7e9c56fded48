use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn taser(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taser"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = taser(args);
    assert!(
        out.status.success(),
        "taser {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.trim()).unwrap_or(Value::Null)
}

fn error_of(args: &[&str]) -> (i32, Value) {
    let out = taser(args);
    assert!(
        !out.status.success(),
        "taser {args:?} unexpectedly succeeded"
    );
    let err: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim())
        .expect("stderr is JSON");
    (out.status.code().unwrap(), err)
}

/// A synthetic workspace whose config trains for a few epochs only.
fn workspace(dir: &Path) -> PathBuf {
    let ws = dir.join("ws");
    let ws_s = ws.to_str().unwrap();
    ok(&["make-task", "--seed", "1", "--workspace", ws_s]);
    let path = ws.join("config.json");
    let mut c: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    c["train"]["epochs"] = 2.into();
    c["retrieval"]["k"] = 10.into();
    c["retrieval"]["candidates"] = 50.into();
    fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    path
}

#[test]
fn params_table_at_bert_base() {
    let out = taser(&["params"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for n in ["109482240", "128371968", "218964480", "166163728"] {
        assert!(text.contains(n), "{n} missing from\n{text}");
    }
    let json = ok(&["params", "--json"]);
    let det = json
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["model"] == "det-r I=2")
        .unwrap();
    assert!((det["ratio_to_bi_encoder"].as_f64().unwrap() - 0.586).abs() < 0.001);
}

#[test]
fn errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("w");
    let (code, err) = error_of(&["make-task", "--workspace", ws.to_str().unwrap()]);
    assert_eq!((code, err["error"].as_str()), (1, Some("parameter")));
    assert!(err["message"].as_str().unwrap().contains("seed"));

    let (code, err) = error_of(&["no-such-command"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));

    let (_, err) = error_of(&["train", "--seed", "1", "--workspace", ws.to_str().unwrap()]);
    assert!(err["message"].as_str().unwrap().contains("paths.corpus"));

    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "{\"id\":0,\"text\":\"x\"}\n{broken\n").unwrap();
    let (_, err) = error_of(&[
        "embed",
        "--workspace",
        ws.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
    ]);
    assert_eq!(err["error"], "parse");
    assert!(err["message"].as_str().unwrap().contains(":2:"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path());
    let ws = config.parent().unwrap().to_path_buf();
    let c = config.to_str().unwrap();
    let file = |n: &str| ws.join(n);

    let report = ok(&["--config", c, "train", "--seed", "3"]);
    assert_eq!(report["epochs_run"], 2);
    let first = fs::read(file("model.json")).unwrap();
    ok(&[
        "--config",
        c,
        "train",
        "--seed",
        "3",
        "--out",
        file("again.json").to_str().unwrap(),
    ]);
    assert_eq!(
        first,
        fs::read(file("again.json")).unwrap(),
        "training is not bitwise reproducible"
    );

    ok(&["--config", c, "embed"]);
    let dense = fs::read(file("dense.idx")).unwrap();
    ok(&["--config", c, "embed"]);
    assert_eq!(dense, fs::read(file("dense.idx")).unwrap());

    ok(&["--config", c, "search", "--mode", "dense"]);
    let run = fs::read_to_string(file("run.dev.trec")).unwrap();
    assert_eq!(run.lines().count(), 32 * 10);
    assert!(run.lines().all(|l| l.split_whitespace().count() == 6));

    let metrics = ok(&["--config", c, "eval"]);
    for key in ["R@1", "R@5", "R@20", "R@100"] {
        let r = metrics["metrics"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
    assert!(metrics["macro_metrics"]["R@5"].is_number());

    // the run file alone reproduces the metrics
    fs::remove_file(file("model.json")).unwrap();
    assert_eq!(ok(&["--config", c, "eval"]), metrics);
    fs::rename(file("again.json"), file("model.json")).unwrap();

    let tuned = ok(&["--config", c, "tune-alpha"]);
    let alpha = tuned["alpha"].as_f64().unwrap();
    assert!((0.5..=2.0).contains(&alpha));
    assert_eq!(tuned["grid"].as_array().unwrap().len(), 16);
    assert!(tuned["dev"].as_f64().unwrap() >= tuned["dense_dev"].as_f64().unwrap());
    let hybrid = ok(&["--config", c, "search"]);
    assert!(hybrid["mode"].as_str().unwrap().starts_with("taser-hybrid"));

    let mined = ok(&["--config", c, "mine", "--seed", "3"]);
    assert_eq!(mined["mined"], 128);
    let lines = fs::read_to_string(file("train_mined.jsonl")).unwrap();
    for line in lines.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let negs = r["negative_passage_ids"].as_array().unwrap();
        assert_eq!(negs.len(), 10);
        assert!(!negs.contains(&r["positive_passage_ids"][0]));
    }

    let round2 = file("model2.json");
    let mined_path = file("train_mined.jsonl");
    ok(&[
        "--config",
        c,
        "--train",
        mined_path.to_str().unwrap(),
        "train",
        "--seed",
        "3",
        "--init",
        file("model.json").to_str().unwrap(),
        "--out",
        round2.to_str().unwrap(),
    ]);
    // the index belongs to round one
    let (_, err) = error_of(&[
        "--config",
        c,
        "search",
        "--checkpoint",
        round2.to_str().unwrap(),
    ]);
    assert_eq!(err["error"], "fingerprint");
}

#[test]
fn make_task_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "make-task",
        "--seed",
        "5",
        "--workspace",
        a.to_str().unwrap(),
    ]);
    ok(&[
        "make-task",
        "--seed",
        "5",
        "--workspace",
        b.to_str().unwrap(),
    ]);
    for f in ["corpus.jsonl", "train.jsonl", "dev.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}
