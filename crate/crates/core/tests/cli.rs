use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specrl::cli::{cmd_analyze, cmd_sweep, ExperimentConfig, LenienceToken};
use specrl::trainer::TrainConfig;
use specrl::Error;

fn specrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "schema_version = 1
[train]
seed = 4
epochs = 3
steps_per_epoch = 2
prompts_per_batch = 8
";

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = specrl(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 3);

    let metrics = out.join("metrics.csv");
    let header = fs::read_to_string(&metrics).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("epoch,step,tokens_generated,tokens_reused,speedup"));
    assert_eq!(csv_rows(&metrics).len(), 3 * (2 + 1));
    for f in ["policy.json", "cache.jsonl", "trace.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_seed_is_a_field_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "schema_version = 1\n[train]\nepochs = 2\n");
    let o = specrl(&["train", "--config", &config]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn bad_lenience_flag_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = specrl(&["sweep", "--config", &config, "--lenience", "1", "--lenience", "plenty"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("plenty"));
}

#[test]
fn paired_runs_give_comparable_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let van = dir.path().join("vanilla");
    let spec = dir.path().join("spec");
    for (mode, out) in [("vanilla", &van), ("spec_rl", &spec)] {
        let o = specrl(&["train", "--config", &config, "--rollout-mode", mode, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = csv_rows(&van.join("metrics.csv"));
    let b = csv_rows(&spec.join("metrics.csv"));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(&x[0], &y[0]);
        assert_eq!(&x[1], &y[1]);
        let base: f64 = x[2].parse().unwrap();
        let gen: f64 = y[2].parse().unwrap();
        let speedup: f64 = y[4].parse().unwrap();
        assert_eq!(speedup, base / gen);
    }
    // Epoch 1 is identical; afterwards spec_rl generates less.
    assert_eq!(&a[2][2], &b[2][2]);
    let later = |rows: &[csv::StringRecord]| -> u64 {
        rows.iter().filter(|r| r[1].is_empty() && &r[0] != "1").map(|r| r[2].parse::<u64>().unwrap()).sum()
    };
    assert!(later(&b) < later(&a));
}

#[test]
fn rerunning_overwrites_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let mut files = Vec::new();
    for _ in 0..2 {
        let o = specrl(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        files.push(["metrics.csv", "policy.json", "cache.jsonl", "trace.jsonl"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

fn sweep_config(dir: &Path, train: TrainConfig) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(train);
    c.output.dir = dir.to_path_buf();
    c
}

fn tokens(list: &[&str]) -> Vec<LenienceToken> {
    list.iter().map(|s| LenienceToken::Text(s.to_string())).collect()
}

#[test]
fn boundary_sweep_is_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = TrainConfig::new(6);
    t.epochs = 4;
    t.steps_per_epoch = 2;
    t.prompts_per_batch = 16;
    let c = sweep_config(dir.path(), t);
    let out = cmd_sweep(&c, &tokens(&["0", "1", "inf"]), &mut std::io::sink()).unwrap();
    assert_eq!(out.runs.len(), 3);
    let from2 = |i: usize| out.runs[i].1.tokens_from_epoch(2);
    assert!(from2(2) <= from2(1) && from2(1) <= from2(0), "{} {} {}", from2(0), from2(1), from2(2));
    assert_eq!(from2(2), 0);

    let summary = csv_rows(&dir.path().join("sweep_summary.csv"));
    let keys: Vec<&str> = summary.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(keys, ["0", "1", "inf"]);
    assert_eq!(csv_rows(&dir.path().join("sweep.csv")).len(), 3 * 4);
}

#[test]
fn verified_prefix_grows_with_lenience_in_epoch_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = TrainConfig::new(1);
    t.epochs = 2;
    let c = sweep_config(dir.path(), t);
    let out = cmd_sweep(&c, &tokens(&["1", "e^0.2", "e^0.5", "e^0.8", "e^1.0"]), &mut std::io::sink()).unwrap();
    let prefix: Vec<f64> = out.runs.iter().map(|(_, r)| r.epochs[1].mean_verified_prefix_len).collect();
    assert!(prefix.windows(2).all(|w| w[0] <= w[1]), "{prefix:?}");
}

fn write_trace(dir: &Path, lines: &[&str]) -> std::path::PathBuf {
    let path = dir.join("trace.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

#[test]
fn analyze_identical_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write_trace(
        dir.path(),
        &[
            r#"{"epoch":1,"prompt_id":0,"slot":0,"tokens":[1,2,11]}"#,
            r#"{"epoch":1,"prompt_id":0,"slot":1,"tokens":[4,11]}"#,
            r#"{"epoch":2,"prompt_id":0,"slot":0,"tokens":[1,2,11]}"#,
            r#"{"epoch":2,"prompt_id":0,"slot":1,"tokens":[4,11]}"#,
            r#"{"epoch":3,"prompt_id":0,"slot":0,"tokens":[1,2,11]}"#,
            r#"{"epoch":3,"prompt_id":0,"slot":1,"tokens":[4,11]}"#,
        ],
    );
    let reports = cmd_analyze(&trace, dir.path(), &mut std::io::sink()).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.mean_rouge1 == 1.0));
}

#[test]
fn analyze_hand_built_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write_trace(
        dir.path(),
        &[
            r#"{"epoch":1,"prompt_id":3,"slot":0,"tokens":[0,1,2]}"#,
            r#"{"epoch":2,"prompt_id":3,"slot":0,"tokens":[0,2,3]}"#,
        ],
    );
    let out = dir.path().join("report");
    let o = specrl(&["analyze", "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0.6667"));
    let rows = csv_rows(&out.join("overlap.csv"));
    assert_eq!(rows.len(), 1);
    let v: f64 = rows[0][2].parse().unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn analyze_rejects_epoch_gap() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write_trace(
        dir.path(),
        &[
            r#"{"epoch":1,"prompt_id":0,"slot":0,"tokens":[1]}"#,
            r#"{"epoch":3,"prompt_id":0,"slot":0,"tokens":[1]}"#,
        ],
    );
    let err = cmd_analyze(&trace, dir.path(), &mut std::io::sink()).unwrap_err();
    assert!(err.to_string().contains("skips epoch 2"), "{err}");
}

#[test]
fn analyze_reports_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write_trace(
        dir.path(),
        &[
            r#"{"epoch":1,"prompt_id":0,"slot":0,"tokens":[1]}"#,
            r#"{"epoch":2,"prompt_id":0,"slot":0,"tokens":[1"#,
        ],
    );
    match cmd_analyze(&trace, dir.path(), &mut std::io::sink()).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
    let o = specrl(&["analyze", "--trace", trace.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2"), "{}", String::from_utf8_lossy(&o.stderr));
}
