//! End-to-end checks of the `sparse-contrast` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparse_contrast::data::build_dictionary;
use sparse_contrast::experiment::read_trajectory;
use sparse_contrast::{Mat64, NetworkParams, SeededRng, Stream};

const TINY: &str = "\
name = tiny
d = 8
d1 = 32
m = 6
n_negatives = 4
k_batches = 2
total_steps = 40
log_every = 10
eval_samples = 16
lambda = 0.06
probe_n_train = 64
probe_n_test = 64
logistic_steps = 20
pca_samples = 10
checkpoint_steps = 0,final
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-contrast"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("tiny.conf");
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_one_and_names_path() {
    let o = run(&["train", "--config", "/nonexistent/desk.conf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/desk.conf"), "{}", stderr(&o));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "etta=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("etta") && msg.contains("stage1_ratio"), "{msg}");
}

#[test]
fn zero_steps_writes_init_record_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "total_steps=0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = read_trajectory(&out).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].step, 0);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("completed") && manifest.contains("total_steps=0"), "{manifest}");
}

#[test]
fn noaug_with_large_lambda_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d = 32\nd1 = 256\n");
    let out = tmp.path().join("run");
    let o = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--mode", "no-aug", "--set", "lambda=0.1", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.join("trajectory.jsonl").exists());
}

/// Writes a dictionary and the checkpoint `W = Mᵀ`, `b = 0` for it.
fn oracle_files(dir: &Path, d: usize, d1: usize) -> (PathBuf, PathBuf) {
    let dict = build_dictionary(d, d1, 4.0, &mut SeededRng::new(3, Stream::Dictionary.id())).unwrap();
    let dict_path = dir.join("dictionary.csv");
    dict.write_csv(&dict_path).unwrap();
    let m = dict.matrix();
    let mut w = vec![0.0; d * d1];
    for j in 0..d {
        for i in 0..d1 {
            w[j * d1 + i] = m[(i, j)];
        }
    }
    let params = NetworkParams::new(Mat64::from_row_major(d, d1, w).unwrap(), vec![0.0; d]).unwrap();
    let ckpt = dir.join("oracle.bin");
    params.save(&ckpt).unwrap();
    (ckpt, dict_path)
}

fn probe_json(ckpt: &Path, dict: &Path, task: &str, extra: &[&str]) -> (Output, serde_json::Value) {
    let mut args = vec!["probe", "--ckpt", ckpt.to_str().unwrap(), "--dict", dict.to_str().unwrap(), "--task", task];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).expect("probe prints JSON");
    (o, v)
}

#[test]
fn oracle_checkpoint_classifies_almost_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, dict) = oracle_files(tmp.path(), 16, 64);
    let (_, v) = probe_json(&ckpt, &dict, "classification", &["--set", "sigma_xi_sq=1e-6"]);
    let acc = v["score"].as_f64().unwrap();
    assert!(acc >= 0.99, "oracle accuracy {acc}");
}

#[test]
fn probe_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, dict) = oracle_files(tmp.path(), 8, 32);
    for task in ["regression", "classification"] {
        let (a, _) = probe_json(&ckpt, &dict, task, &["--seed", "5"]);
        let (b, _) = probe_json(&ckpt, &dict, task, &["--seed", "5"]);
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn probe_rejects_dimension_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dict) = oracle_files(tmp.path(), 8, 32);
    let params = NetworkParams::new(Mat64::from_row_major(3, 40, vec![0.1; 120]).unwrap(), vec![0.0; 3]).unwrap();
    let ckpt = tmp.path().join("bad.bin");
    params.save(&ckpt).unwrap();
    let o = run(&[
        "probe", "--ckpt", ckpt.to_str().unwrap(), "--dict", dict.to_str().unwrap(), "--task", "regression",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", "--run", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_has_one_row_per_logged_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = read_trajectory(&out).unwrap();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40]);
    let o = run(&["report", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows = text.lines().filter(|l| l.starts_with("| ") && l.split('|').nth(1).is_some_and(|c| c.trim().parse::<u64>().is_ok())).count();
    assert_eq!(rows, recs.len(), "{text}");
    assert!(out.join("ckpt_0.bin").exists() && out.join("ckpt_40.bin").exists());
    assert!(out.join("pca_40.csv").exists() && out.join("dictionary.csv").exists());
}

#[test]
fn paired_zero_steps_gives_single_summary_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("pair");
    let o = run(&[
        "paired", "--config", cfg.to_str().unwrap(), "--seed", "2", "--out", out.to_str().unwrap(), "--set",
        "total_steps=0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[0].starts_with("step,sparse_fraction_aug,sparse_fraction_noaug"));
    // Both legs start from the same initialisation.
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[0], "0");
    assert_eq!(row[1], row[2]);
    assert_eq!(row[3], row[4]);

    let o = run(&["report", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("paired verdicts"));
    assert!(text.lines().filter(|l| l.starts_with("- PASS") || l.starts_with("- FAIL")).count() >= 4);
}
