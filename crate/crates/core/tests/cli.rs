use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dgs(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dgs"));
    cmd.args(args).env_remove("DGS_DATA_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout_records(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SMALL: &str = r#"
feature_dim = 4
split = [0.7, 0.15, 0.15]
synthetic_seed = 3
task = "node_class"
method = "dgs"
seed = 1
max_epochs = 3
state_size = 20
segments = 4

[synthetic]
sources = 60
destinations = 20
events = 2000
feature_dim = 4
discounts = [0.8]
weights = [1.0]
noise = 0.3
positive_rate = 0.5
mean_gap = 1.0
"#;

/// The JSON error record is the last stderr line; log lines may precede it.
fn stderr_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().rev().find(|l| !l.trim().is_empty()).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = dgs(&["train", "--config", "/nonexistent/run.toml", "--out", s(&out)], &[]);
    assert_eq!(res.status.code(), Some(1));
    let err = stderr_record(&res);
    assert!(err["message"].as_str().unwrap().contains("config not found"), "{err}");
    assert_eq!(err["exit_code"], 1);
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &format!("{SMALL}\n[extra]\nx = 1\n"));
    let res = dgs(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], &[]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn train_eval_bench_on_synthetic_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let run = dir.path().join("run");
    let res = dgs(&["train", "--config", s(&cfg), "--out", s(&run), "--dump-params"], &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let records = stdout_records(&res);
    let best = records[0]["best_val_metric"].as_f64().unwrap();
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    for f in ["model.dgsm", "config.json", "params.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["exit_code"], 0);

    let ckpt = run.join("model.dgsm");
    let ev = dir.path().join("eval");
    let res = dgs(
        &["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--split", "val", "--out", s(&ev)],
        &[],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let metrics: Value = serde_json::from_slice(&fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["auc"].as_f64().unwrap(), best);

    let bench = dir.path().join("bench");
    let csv = dir.path().join("batches.csv");
    let res = dgs(
        &[
            "bench", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--batches", "5", "--batch-size", "50",
            "--iterations", "3", "--csv", s(&csv), "--out", s(&bench),
        ],
        &[],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_slice(&fs::read(bench.join("latency.json")).unwrap()).unwrap();
    assert_eq!(report["iteration_seconds"].as_array().unwrap().len(), 3);
    assert_eq!(report["events_scored"], 250);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);
}

#[test]
fn tune_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &SMALL.replace("max_epochs = 3", "max_epochs = 2"));
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("tune{k}"));
        let res = dgs(&["tune", "--config", s(&cfg), "--budget", "3", "--seed", "1", "--out", s(&out)], &[]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        let trials = fs::read_to_string(out.join("trials.jsonl")).unwrap();
        assert_eq!(trials.lines().count(), 3);
        assert!(out.join("best_config.toml").exists());
        outputs.push((trials, fs::read_to_string(out.join("best_config.toml")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn divergent_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("src,dst,timestamp,label,f0,f1\n");
    for i in 0..400 {
        let x = if i % 2 == 0 { 1.5 } else { -0.5 };
        csv.push_str(&format!("{},{},{i},{},{x},{}\n", i % 7, i % 5, i % 2, -x));
    }
    fs::write(dir.path().join("events.csv"), csv).unwrap();
    let cfg = write_config(
        dir.path(),
        "nan.toml",
        "data = \"events.csv\"\nfeature_dim = 2\nstate_size = 10\nsegments = 2\nmax_epochs = 2\nhead_learning_rate = 1e300\n",
    );
    let res = dgs(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], &[]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let err = stderr_record(&res);
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn data_dir_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    fs::create_dir(&data_dir).unwrap();
    let synth = dir.path().join("synth");
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let res = dgs(&["synth", "--config", s(&cfg), "--events", "600", "--out", s(&synth)], &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    fs::copy(synth.join("events.csv"), data_dir.join("events.csv")).unwrap();

    let conf_dir = dir.path().join("conf");
    fs::create_dir(&conf_dir).unwrap();
    let cfg = write_config(
        &conf_dir,
        "file.toml",
        "data = \"events.csv\"\nfeature_dim = 4\nstate_size = 20\nsegments = 4\nmax_epochs = 1\n",
    );
    let out = dir.path().join("o");
    let res = dgs(&["train", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(res.status.code(), Some(1));
    let res = dgs(&["train", "--config", s(&cfg), "--out", s(&out)], &[("DGS_DATA_DIR", &data_dir)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn ingest_writes_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let synth = dir.path().join("synth");
    assert_eq!(dgs(&["synth", "--config", s(&cfg), "--out", s(&synth)], &[]).status.code(), Some(0));
    let out = dir.path().join("ingest");
    let res = dgs(
        &["ingest", "--data", s(&synth.join("events.csv")), "--feature-dim", "4", "--out", s(&out)],
        &[],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let stats = fs::read_to_string(out.join("stats.jsonl")).unwrap();
    assert_eq!(stats.lines().count(), 4);
}

#[test]
fn help_exits_zero() {
    assert_eq!(dgs(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(dgs(&["frobnicate"], &[]).status.code(), Some(1));
}
