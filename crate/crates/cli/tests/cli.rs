use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn topoforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topoforge")).args(args).output().expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simp_writes_raster_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cant");
    let summary = ok_json(topoforge(&[
        "simp", "--dims", "60,20", "--case", "cantilever", "--volfrac", "0.5", "--rmin", "1.5", "--out", p(&out), "--pgm",
    ]));
    assert_eq!(summary["v"], 1);
    assert_eq!(summary["dims"], serde_json::json!([20, 60]));
    assert_eq!(summary["converged"], true);
    let raster = std::fs::read(dir.path().join("cant.bin")).unwrap();
    assert_eq!(raster.len(), 60 * 20 * 4);
    let record: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cant.json")).unwrap()).unwrap();
    assert_eq!(record["config_hash"], summary["config_hash"]);
    assert_eq!(record["history"].as_array().unwrap().len() as u64, summary["iterations"].as_u64().unwrap());
    assert!(dir.path().join("cant.pgm").exists());
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let out = topoforge(&["simp", "--dims", "0,3", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = topoforge(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = topoforge(&["predict", "--model", "/nonexistent.twgt", "--dims", "16,8", "--out", "/tmp/none"]);
    assert_eq!(out.status.code(), Some(1));
    let line: Value = serde_json::from_slice(&out.stderr).expect("error line is JSON");
    assert_eq!(line["v"], 1);
    assert_eq!(line["error"]["kind"], "io");
    assert!(line["error"]["message"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let lo = ok_json(topoforge(&["gen", "--dims", "16,8", "--count", "10", "--seed", "3", "--test-count", "3", "--out", p(&d("lo.topo"))]));
    assert_eq!(lo["count"], 10);
    assert_eq!(lo["test"], 3);
    assert!(d("lo.topo.json").exists());
    let hi = ok_json(topoforge(&["gen", "--dims", "32,16", "--count", "5", "--seed", "4", "--test-count", "2", "--out", p(&d("hi.topo"))]));
    assert_eq!(hi["count"], 5);

    let src = ok_json(topoforge(&[
        "train-source", "--data", p(&d("lo.topo")), "--out", p(&d("src.twgt")), "--epochs", "2", "--width-divisor", "8",
        "--augment-mirror",
    ]));
    assert_eq!(src["kind"], "source");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d("src.twgt.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset_hash"], lo["config_hash"]);
    assert_eq!(manifest["weights_hash"], src["weights_hash"]);

    let tgt = ok_json(topoforge(&[
        "train-target", "--source", p(&d("src.twgt")), "--data", p(&d("hi.topo")), "--out", p(&d("tgt.twgt")), "--epochs", "2",
    ]));
    assert_eq!(tgt["kind"], "target");
    assert_eq!(tgt["dims"], serde_json::json!([16, 32]));
    let scratch = ok_json(topoforge(&[
        "train-target", "--source", p(&d("src.twgt")), "--data", p(&d("hi.topo")), "--out", p(&d("scr.twgt")), "--epochs", "1",
        "--scratch",
    ]));
    assert!(scratch["params"].as_u64().unwrap() >= tgt["params"].as_u64().unwrap());

    let pred = ok_json(topoforge(&["predict", "--model", p(&d("tgt.twgt")), "--dims", "32,16", "--out", p(&d("pred")), "--pgm"]));
    assert_eq!(pred["dims"], serde_json::json!([16, 32]));
    assert_eq!(std::fs::read(d("pred.bin")).unwrap().len(), 32 * 16 * 4);
    let bin = std::fs::read(d("pred.binary.bin")).unwrap();
    assert!(bin.chunks(4).all(|c| {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        v == 0.0 || v == 1.0
    }));

    let report = ok_json(topoforge(&["eval", "--model", p(&d("tgt.twgt")), "--data", p(&d("hi.topo"))]));
    assert_eq!(report["count"], 2);
    for key in ["mse", "ba", "compliance_error"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    // A problem file for the single-pair evaluation and refinement.
    let simp = ok_json(topoforge(&["simp", "--dims", "32,16", "--out", p(&d("truth"))]));
    assert_eq!(simp["converged"], true);
    let record: Value = serde_json::from_str(&std::fs::read_to_string(d("truth.json")).unwrap()).unwrap();
    std::fs::write(d("prob.json"), record["problem"].to_string()).unwrap();
    let pair = ok_json(topoforge(&[
        "eval", "--pred", p(&d("pred.bin")), "--truth", p(&d("truth.bin")), "--problem", p(&d("prob.json")), "--diff-pgm",
        p(&d("diff.pgm")),
    ]));
    for key in ["mse", "ba", "compliance_error"] {
        assert!(pair.get(key).is_some(), "{key}");
    }
    assert!(d("diff.pgm").exists());

    let refined = ok_json(topoforge(&["refine", "--problem", p(&d("prob.json")), "--init", p(&d("truth.bin")), "--out", p(&d("ref"))]));
    assert!(refined["iterations"].as_u64().unwrap() < simp["iterations"].as_u64().unwrap());
    let from_model = ok_json(topoforge(&["refine", "--problem", p(&d("prob.json")), "--model", p(&d("tgt.twgt")), "--out", p(&d("ref2"))]));
    assert_eq!(from_model["v"], 1);
}
