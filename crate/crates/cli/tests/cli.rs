use std::path::Path;
use std::process::{Command, Output};

use drae_core::synthkit::{KitManifest, Split};

fn drae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = drae(args);
    assert!(
        out.status.success(),
        "drae {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(drae(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(drae(&["train", "--data", "x"]).status.code(), Some(2));
    assert_eq!(drae(&["evaluate", "--level", "vial", "--data", "a", "--checkpoint", "b", "--out", "c"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = drae(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    let out = drae(&["bench", "--net", "huge"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_budget() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let stdout = ok(&["bench", "--batches", "3", "--warmup", "1", "--out", s(&json)]);
    assert!(stdout.contains("mean per patch"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let m = &report["model"];
    assert_eq!(m["mean_patch_ms"].as_f64().unwrap(), m["mean_batch_ms"].as_f64().unwrap() / 60.0);
    assert_eq!(m["batches"], 3);

    let out = drae(&["bench", "--batches", "2", "--warmup", "0", "--budget-ms", "0.000001"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn smoke_pipeline_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("kit");
    let model = root.join("model");
    let cal = root.join("cal");
    let inf = root.join("infer");
    let eval = root.join("eval");

    ok(&["gen-data", "--preset", "smoke", "--seed", "3", "--out", s(&data)]);
    let manifest = KitManifest::load(&data).unwrap();
    assert!(data.join("manifest.json").exists());

    let stdout = ok(&["train", "--data", s(&data), "--out", s(&model), "--net", "toy", "--max-steps", "3"]);
    assert!(stdout.contains("trained 3 steps"), "{stdout}");
    let ckpt = model.join("model.ckpt");
    assert!(ckpt.exists() && model.join("telemetry.jsonl").exists() && model.join("fit_report.json").exists());
    let lines = std::fs::read_to_string(model.join("telemetry.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    ok(&["calibrate", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&cal), "--level", "strip"]);
    let thresholds = cal.join("thresholds.toml");
    let text = std::fs::read_to_string(&thresholds).unwrap();
    assert!(text.contains("level = \"strip\""), "{text}");

    let strip = manifest.split(Split::Test).find(|e| e.defective).unwrap().id.clone();
    ok(&["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--thresholds", s(&thresholds), "--out", s(&inf), "--strip", &strip]);
    let verdict: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(inf.join(format!("verdict_{strip}.json"))).unwrap()).unwrap();
    let runs = verdict["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 10);
    assert!(verdict["product"].is_string());
    let rejected: usize = runs.iter().map(|r| r["rejected_patches"].as_array().unwrap().len()).sum();
    assert_eq!(verdict["heatmaps"].as_array().unwrap().len(), 2 * rejected);

    let out = drae(&["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--thresholds", s(&thresholds), "--out", s(&inf), "--strip", "nope"]);
    assert_eq!(out.status.code(), Some(1));

    ok(&["evaluate", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    for level in ["patch", "strip", "run"] {
        let r: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(eval.join(format!("report_{level}.json"))).unwrap()).unwrap();
        let ba = r["balanced_accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ba));
        assert_eq!(r["positive_class"], "defective");
    }
    let csv = std::fs::read_to_string(eval.join("test_scores.csv")).unwrap();
    let tests = manifest.split(Split::Test).count();
    assert_eq!(csv.lines().count(), 1 + tests * 10 * 60);

    // Fixed thresholds skip calibration.
    ok(&["evaluate", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval), "--level", "run", "--thresholds", s(&thresholds)]);
}
