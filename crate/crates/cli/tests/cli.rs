use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisenet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok_lines(args: &[&str]) -> Vec<Value> {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--data"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("m.bin");
    assert_eq!(run(&["train", "--data", s(&missing), "--out", s(&out)]).status.code(), Some(2));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"event_id\": 1}\n").unwrap();
    assert_eq!(run(&["ingest", s(&bad)]).status.code(), Some(2));
    let data = dir.path().join("d.jsonl");
    ok_lines(&["synth", "--n-per-class", "5", "--out", s(&data)]);
    assert_eq!(run(&["cv", "--data", s(&data), "--workers", "0"]).status.code(), Some(1));
    assert_eq!(run(&["gradcheck"]).status.code(), Some(0));
}

#[test]
fn ingest_reports_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let out = ok_lines(&["synth", "--n-per-class", "6", "--seed", "2", "--out", s(&data)]);
    assert_eq!(out[0]["events"], 12);
    let copy = dir.path().join("copy.jsonl");
    let summary = &ok_lines(&["ingest", s(&data), "--out", s(&copy)])[0];
    assert_eq!(summary["events"], 12);
    assert_eq!(summary["classes"]["aircraft"], 6);
    assert_eq!(summary["unlabeled"], 0);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&copy).unwrap());

    let variant = dir.path().join("v.jsonl");
    let out = ok_lines(&["synth", "--variant", "4", "--difficulty", "0.6", "--out", s(&variant)]);
    assert_eq!(out[0]["classes"]["community"], 4);
}

#[test]
fn classify_is_deterministic_and_scores_every_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let model = dir.path().join("m.bin");
    ok_lines(&["synth", "--n-per-class", "10", "--out", s(&data)]);
    let trained = ok_lines(&[
        "train", "--data", s(&data), "--out", s(&model), "--steps", "10", "--batch-size", "16", "--model-version", "v7",
    ]);
    assert_eq!(trained[0]["train_events"], 20);

    let a = ok_lines(&["classify", "--model", s(&model), "--event", s(&data)]);
    let b = ok_lines(&["classify", "--model", s(&model), "--event", s(&data)]);
    assert_eq!(a.len(), 20);
    assert_eq!(a, b);
    for v in &a {
        let p = &v["prediction"]["probabilities"];
        assert!((p[0].as_f64().unwrap() + p[1].as_f64().unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(v["prediction"]["model_version"], "v7");
        let h = v["prediction"]["entropy"].as_f64().unwrap();
        let queued = v["prediction"]["triage"] == "queued_for_labeling";
        assert_eq!(queued, h > 0.45);
    }

    let single = dir.path().join("one.json");
    let first = std::fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    let pretty: Value = serde_json::from_str(&first).unwrap();
    std::fs::write(&single, serde_json::to_string_pretty(&pretty).unwrap()).unwrap();
    let one = ok_lines(&["classify", "--model", s(&model), "--event", s(&single)]);
    assert_eq!(one, vec![a[0].clone()]);
}

#[test]
fn cv_writes_report_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let report = dir.path().join("out/cv.json");
    ok_lines(&["synth", "--n-per-class", "12", "--out", s(&data)]);
    let summary = &ok_lines(&[
        "cv", "--data", s(&data), "--k", "3", "--seeds", "2", "--steps", "5", "--batch-size", "16",
        "--report", s(&report), "--workers", "1",
    ])[0];
    assert_eq!(summary["runs"], 6);
    let parsed: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(parsed["runs"].as_array().unwrap().len(), 6);
    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    let counted: u64 = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(counted, 6);

    let hist = dir.path().join("h.csv");
    ok_lines(&["histogram", "--report", s(&report), "--out", s(&hist), "--bin-width", "0.01"]);
    assert_eq!(std::fs::read_to_string(hist).unwrap(), csv);
}

#[test]
fn detect_reads_a_level_csv() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("levels.csv");
    let mut csv = String::from("timestamp,level_dba\n");
    let levels = [50.0; 5].iter().chain(&[66.0; 10]).chain(&[50.0; 5]).copied().collect::<Vec<f64>>();
    for (i, l) in levels.iter().enumerate() {
        csv.push_str(&format!("2024-05-01T12:00:{i:02}Z,{l}\n"));
    }
    std::fs::write(&stream, csv).unwrap();
    let events = ok_lines(&["detect", "--stream", s(&stream)]);
    assert_eq!(events.len(), 1);
    assert_eq!(events[0]["start_index"], 5);
    assert_eq!(events[0]["end_index"], 14);
    assert_eq!(events[0]["duration_seconds"], 10);
    assert_eq!(events[0]["peak_dba"], 66.0);

    std::fs::write(&stream, "2024-05-01T12:00:00Z,loud\n").unwrap();
    assert_eq!(run(&["detect", "--stream", s(&stream)]).status.code(), Some(2));
}
