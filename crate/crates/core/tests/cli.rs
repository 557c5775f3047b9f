use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seed = 3
name = "tiny"

[model]
input_dim = 16
hidden = [8]
classes = 3

[data]
dim = 16
classes = 3
per_class = 30
test_size = 30

[attack]
kind = "fgsm"
epsilon = 0.1

[regularizer]
kind = "elle"
lambda = 2.0

[schedule]
epochs = 2
batch_size = 20

[eval]
probe_size = 30
"#;

fn elle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elle"))
        .args(args)
        .output()
        .unwrap()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn train_then_eval_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run").display().to_string();
    let o = elle(&["train", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = &json_lines(&o)[0];
    assert_eq!(summary["regularizer"], "elle");
    for f in ["metrics.jsonl", "epochs.csv", "model.ckpt", "config.toml"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("run/epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let ckpt = dir.path().join("run/model.ckpt").display().to_string();
    let o = elle(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        &out,
        "--checkpoint",
        &ckpt,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = &json_lines(&o)[0];
    assert_eq!(rep["examples"], 30);
    assert!(rep["robust_acc"].as_f64().unwrap() <= rep["clean_acc"].as_f64().unwrap() + 1e-12);

    let o = elle(&[
        "probe",
        "--config",
        &cfg,
        "--out",
        &out,
        "--checkpoint",
        &ckpt,
        "--samples",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Vec<String> = json_lines(&o)
        .iter()
        .map(|r| r["metric"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(metrics.len(), 3);
    assert_eq!(metrics[0], "elin");
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = elle(&[
        "train",
        "--config",
        &cfg,
        "--out",
        &dir.path().join("a").display().to_string(),
    ]);
    let b = elle(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "4",
        "--out",
        &dir.path().join("b").display().to_string(),
    ]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(json_lines(&b)[0]["seed"], 4);
    let ca = std::fs::read(dir.path().join("a/model.ckpt")).unwrap();
    let cb = std::fs::read(dir.path().join("b/model.ckpt")).unwrap();
    assert_ne!(ca, cb);
}

#[test]
fn misspelled_key_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("batch_size", "batch"));
    let o = elle(&[
        "train",
        "--config",
        &cfg,
        "--out",
        &dir.path().join("x").display().to_string(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("schedule") && err.contains("batch"), "{err}");
}

#[test]
fn oversized_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = elle(&["train", "--config", &cfg, "--seed", &u64::MAX.to_string()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn grid_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("grid").display().to_string();
    let o = elle(&[
        "grid",
        "--config",
        &cfg,
        "--out",
        &out,
        "--lambdas",
        "0,1",
        "--seeds",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_lines(&o).len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("grid/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
