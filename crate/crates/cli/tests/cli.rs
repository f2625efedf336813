use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motion-reid"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&[
        "synth",
        "--out",
        d,
        "--n-participants",
        "4",
        "--minutes",
        "1.5",
        "--seed",
        "9",
    ]);
}

#[test]
fn synth_writes_one_file_per_session() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path());
    let n = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(n, 32);
    assert!(dir.path().join("P001_d1_w3.jsonl").exists());
}

#[test]
fn extract_train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    synth_small(&traces);
    let t = traces.to_str().unwrap();
    let feats = dir.path().join("m3.csv");
    ok(&[
        "extract",
        "--traces",
        t,
        "--preset",
        "M3",
        "--out",
        feats.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(&feats).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("participant,dataset,week,section,sample_time,"));
    assert_eq!(header.split(',').count(), 5 + 45);

    let model = dir.path().join("forest.bin");
    let pred = dir.path().join("pred.json");
    let early = format!("{t}/*_w[1-6].jsonl");
    let late = format!("{t}/*_w[78].jsonl");
    ok(&[
        "train",
        "--traces",
        &early,
        "--preset",
        "M3",
        "--profile",
        "delay",
        "--trees-per-draw",
        "4",
        "--seed",
        "2",
        "--out",
        model.to_str().unwrap(),
    ]);
    ok(&[
        "predict",
        "--traces",
        &late,
        "--preset",
        "M3",
        "--model",
        model.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    let report_dir = dir.path().join("report");
    ok(&[
        "eval",
        "--predictions",
        pred.to_str().unwrap(),
        "--n",
        "2,3",
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(report.lines().next().unwrap().contains("acc@2,acc@3"));
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn missing_seed_is_a_config_error() {
    let out = run(&["exp", "delay", "--traces", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_preset_is_rejected() {
    let out = run(&["extract", "--traces", "x", "--preset", "M9", "--out", "y"]);
    assert!(!out.status.success());
}

#[test]
fn malformed_trace_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("P001_d1_w1.jsonl");
    std::fs::write(&f, "{not json\n").unwrap();
    let out = run(&[
        "extract",
        "--traces",
        f.to_str().unwrap(),
        "--out",
        dir.path().join("o.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_repetitions_rejected_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"design": "duration", "seed": 1, "synthetic": {"n_participants": 3}, "duration": {"repetitions": 0}}"#)
        .unwrap();
    let out = run(&["exp", "duration", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identification_reports_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    let d = traces.to_str().unwrap();
    ok(&[
        "synth",
        "--out",
        d,
        "--n-participants",
        "4",
        "--minutes",
        "6",
        "--seed",
        "5",
    ]);
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"design": "identification", "seed": 3, "preset": "M2", "n_values": [2, 30],
            "forest_override": {"trees_per_draw": 4, "draws": 1}}"#,
    )
    .unwrap();
    let outs: Vec<_> = (0..2).map(|i| dir.path().join(format!("out{i}"))).collect();
    for o in &outs {
        ok(&[
            "exp",
            "identification",
            "--config",
            cfg.to_str().unwrap(),
            "--traces",
            d,
            "--out",
            o.to_str().unwrap(),
        ]);
    }
    for name in [
        "identification.csv",
        "identification.json",
        "between_plan.json",
        "within_plan.json",
    ] {
        let a = std::fs::read(outs[0].join(name)).unwrap();
        let b = std::fs::read(outs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    let csv = std::fs::read_to_string(outs[0].join("identification.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    // Fixed schema: acc@30 keeps its column but is empty with only 4 classes.
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "acc@30").unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(col), Some(""));
    }
    assert!(outs[0].join("timings.json").exists());

    // The saved plan replays through train/predict.
    let model = dir.path().join("f.bin");
    let pred = dir.path().join("p.json");
    let plan = outs[0].join("between_plan.json");
    ok(&[
        "train",
        "--traces",
        d,
        "--preset",
        "M2",
        "--plan",
        plan.to_str().unwrap(),
        "--trees-per-draw",
        "4",
        "--draws",
        "1",
        "--seed",
        "1",
        "--out",
        model.to_str().unwrap(),
    ]);
    ok(&[
        "predict",
        "--traces",
        d,
        "--preset",
        "M2",
        "--plan",
        plan.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    let p: serde_json::Value = serde_json::from_slice(&std::fs::read(&pred).unwrap()).unwrap();
    assert_eq!(p["rows"].as_array().unwrap().len(), 8);
}
