use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use serde_json::Value;
use taskmerge_core::origin::weight_average;
use taskmerge_core::tensor_store::{load_checkpoint, save_checkpoint, DenseTensor, Dtype, TensorMap};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taskmerge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn checkpoint(seed: f64) -> TensorMap {
    let mut m = TensorMap::new();
    let w = DMatrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.37 + seed).sin());
    m.insert("fc.weight", DenseTensor::from_matrix(&w, Dtype::F64));
    m.insert("fc.bias", DenseTensor::from_f64(vec![3], Dtype::F64, vec![seed, -seed, 0.5 * seed]).unwrap());
    m
}

/// Pretrained plus three fine-tuned checkpoints on disk.
fn fixtures(dir: &Path) -> Vec<PathBuf> {
    (0..4)
        .map(|i| {
            let p = dir.join(format!("ckpt{i}.safetensors"));
            save_checkpoint(&checkpoint(i as f64 * 0.9), &p).unwrap();
            p
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn merge_full_rank_mean_origin_is_weight_average() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fixtures(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "--out-dir", s(&out), "merge", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2]), s(&ck[3]),
        "--origin", "mean", "--ratio", "1", "--lambda", "0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let merged = load_checkpoint(out.join("merged.safetensors")).unwrap();
    let fts: Vec<TensorMap> = ck[1..].iter().map(|p| load_checkpoint(p).unwrap()).collect();
    assert!(merged.max_abs_diff(&weight_average(&fts).unwrap()).unwrap() < 1e-12);

    let manifest = read_json(out.join("manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn merge_defaults_and_manifest_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fixtures(dir.path());
    let out = dir.path().join("out");
    let args = ["--out-dir", s(&out), "merge", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2])];
    assert!(run(&args).status.success());
    let first = read_json(out.join("manifest.json"));
    assert_eq!(first["plan"]["rank_ratio"], 0.08);

    save_checkpoint(&checkpoint(7.0), &ck[2]).unwrap();
    assert!(run(&args).status.success());
    let second = read_json(out.join("manifest.json"));
    assert_eq!(first["inputs"][0], second["inputs"][0]);
    assert_ne!(first["inputs"][2]["sha256"], second["inputs"][2]["sha256"]);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fixtures(dir.path());
    let o = run(&["merge", "--origin", "sideways", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2])]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["index", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2])]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["merge", "--pretrained", s(&ck[0]), s(&ck[1])]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn index_full_rank_returns_task_model() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fixtures(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "--out-dir", s(&out), "index", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2]), s(&ck[3]),
        "--task", "1", "--ratio", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = load_checkpoint(out.join("task1.safetensors")).unwrap();
    assert!(got.max_abs_diff(&load_checkpoint(&ck[2]).unwrap()).unwrap() < 1e-12);
    let report = read_json(out.join("storage.json"));
    assert!(report["mask_bits"].is_u64());
    assert!(report["lowrank_bits"].is_u64());

    let o = run(&["--out-dir", s(&out), "index", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2]), "--task", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_writes_both_origins() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fixtures(dir.path());
    let out = dir.path().join("out");
    let o = run(&["--out-dir", s(&out), "analyze", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2]), s(&ck[3]), "--ks", "1,2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("analysis.csv")).unwrap();
    assert!(csv.starts_with("origin,layer,k,interference,reconstruction\n"));
    assert!(csv.contains("\ncentered,fc.weight,1,"));
    assert!(csv.contains("\npretrained,fc.weight,2,"));
    let json = read_json(out.join("analysis.json"));
    assert_eq!(json.as_array().unwrap().len(), 2);
}

#[test]
fn matrix_exclude_overrides_classification() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fixtures(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "--out-dir", s(&out), "--matrix-exclude", "fc.*", "index", "--pretrained", s(&ck[0]), s(&ck[1]), s(&ck[2]),
        "--task", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(out.join("storage.json"))["mask_bits"], 0);
}

#[test]
fn certify_hundred_suites() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out-dir", s(dir.path()), "certify", "--count", "100"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("certify.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 100);
    assert!(lines.iter().all(|l| l["holds"] == true));
}

#[test]
fn samplesize_prints_385() {
    let o = run(&["samplesize", "--a", "0", "--b", "1", "--eps", "0.05", "--z", "1.96"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "385");
    assert_eq!(String::from_utf8(run(&["samplesize"]).stdout).unwrap().trim(), "385");
    assert_eq!(run(&["samplesize", "--eps", "0"]).status.code(), Some(1));
}

#[test]
fn sweep_three_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out-dir", s(dir.path()), "sweep", "--ratios", "0,0.08,1", "--lambdas", "0.5,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // 3 ratios × 2 lambdas × 4 tasks.
    assert_eq!(rows.len(), 24);
    let json = read_json(dir.path().join("sweep.json"));
    let wa = &json["weight_average"];
    for row in json["rows"].as_array().unwrap() {
        if row["ratio"] == 0.0 || row["ratio"] == 1.0 {
            assert_eq!(&row["accuracies"], wa);
        }
    }
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"samplesize": {"eps": 0.1}, "certify": {"count": 3}}"#).unwrap();
    let o = run(&["--config", s(&cfg), "samplesize"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "97");
    let o = run(&["--config", s(&cfg), "samplesize", "--eps", "0.05"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "385");
    let o = run(&["--config", s(&cfg), "--out-dir", s(dir.path()), "certify"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("certify.jsonl")).unwrap().lines().count(), 3);

    std::fs::write(&cfg, r#"{"samplesize": {"epsilon": 0.1}}"#).unwrap();
    assert_eq!(run(&["--config", s(&cfg), "samplesize"]).status.code(), Some(2));
}

#[test]
fn adapt_writes_log_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out-dir", s(dir.path()), "adapt", "--iters", "20", "--lr", "0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("adapt_log.csv")).unwrap();
    assert!(log.starts_with("iter,entropy,mean_lambda\n"));
    assert_eq!(log.lines().count(), 22);
    let table = read_json(dir.path().join("adapt_table.json"));
    assert_eq!(table["values"].as_array().unwrap().len(), 2);

    let o = run(&["--out-dir", s(dir.path()), "adapt", "--method", "adarank", "--iters", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("adapt_masks.json").exists());
}
