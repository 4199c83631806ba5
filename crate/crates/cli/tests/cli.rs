use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn quadfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = quadfit(args);
    assert!(
        out.status.success(),
        "quadfit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// make-toy, sample and rasterize into `root`; returns the manifest path.
fn pipeline(root: &Path, seed: &str, n: &str) -> std::path::PathBuf {
    let model = root.join("model");
    let scenes = root.join("scenes.json");
    let data = root.join("data");
    ok(&["make-toy", "--out", s(&model)]);
    ok(&[
        "--seed",
        seed,
        "sample",
        "--model",
        s(&model),
        "--n",
        n,
        "--out",
        s(&scenes),
    ]);
    ok(&[
        "rasterize",
        "--model",
        s(&model),
        "--in",
        s(&scenes),
        "--out",
        s(&data),
    ]);
    data.join("manifest.jsonl")
}

#[test]
fn eval_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pipeline(dir.path(), "3", "5");
    for name in [
        "000000.json",
        "000000.png",
        "000000_mask.png",
        "000000_depth.pfm",
    ] {
        assert!(
            dir.path().join("data").join(name).exists(),
            "{name} missing"
        );
    }
    let report_path = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--pred",
        s(&manifest),
        "--gt",
        s(&manifest),
        "--model",
        s(&dir.path().join("model")),
        "--out",
        s(&report_path),
        "--csv",
        s(&csv),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["n_instances"], 5);
    assert!(report["pa_mpjpe"].as_f64().unwrap() < 1e-9);
    assert!(report["pa_mpvpe"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["pck_010"].as_f64().unwrap(), 1.0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);
}

#[test]
fn filter_accepts_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pipeline(dir.path(), "4", "4");
    let out = dir.path().join("filtered");
    ok(&[
        "filter",
        "--in",
        s(&manifest),
        "--candidates",
        s(&dir.path().join("data")),
        "--out",
        s(&out),
    ]);
    let lines = |name: &str| fs::read_to_string(out.join(name)).unwrap().lines().count();
    assert_eq!(lines("accepted.jsonl"), 4);
    assert_eq!(lines("uncertain.jsonl"), 0);
    assert_eq!(lines("rejected.jsonl"), 0);
}

#[test]
fn aggregate_writes_a_partition() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pipeline(dir.path(), "5", "20");
    let out = dir.path().join("agg");
    ok(&[
        "--seed",
        "1",
        "aggregate",
        "--in",
        s(&manifest),
        "--out",
        s(&out),
        "--batches",
        "2",
    ]);
    let count = |name: &str| fs::read_to_string(out.join(name)).unwrap().lines().count();
    assert_eq!(count("val.jsonl"), 3);
    assert_eq!(count("train.jsonl"), 17);
    assert_eq!(count("batches.jsonl"), 2);
    let table: Value =
        serde_json::from_str(&fs::read_to_string(out.join("sources.json")).unwrap()).unwrap();
    assert_eq!(table[0]["id"], "CtrlAni3D");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "9", "3");
    pipeline(b.path(), "9", "3");
    for name in [
        "scenes.json",
        "data/000001.json",
        "data/000001_mask.png",
        "data/000002_depth.pfm",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn fit_recovers_a_rendered_scene() {
    let dir = tempfile::tempdir().unwrap();
    // Seed 0 scene 0 has enough visible keypoints for the fitter.
    let manifest = pipeline(dir.path(), "0", "1");
    let fits = dir.path().join("fits");
    ok(&[
        "fit",
        "--model",
        s(&dir.path().join("model")),
        "--in",
        s(&manifest),
        "--out",
        s(&fits),
    ]);
    assert!(fits.join("000000.fit.json").exists());
    let report = dir.path().join("report.json");
    ok(&[
        "eval",
        "--pred",
        s(&fits.join("manifest.jsonl")),
        "--gt",
        s(&fits.join("inputs.jsonl")),
        "--out",
        s(&report),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report["pa_mpjpe"].as_f64().unwrap() < 0.05);
}

#[test]
fn unknown_flag_exits_one() {
    let out = quadfit(&["make-toy", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = quadfit(&[
        "sample",
        "--model",
        s(&dir.path().join("nope")),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"prior_sigma": 0.3, "colour": 1}"#).unwrap();
    let out = quadfit(&[
        "--config",
        s(&cfg),
        "make-toy",
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
