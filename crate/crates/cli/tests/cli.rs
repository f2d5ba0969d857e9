use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use txloc::Count;
use txloc_cli::commands::ReportRow;
use txloc_cli::dataset::{layouts_disjoint, load_split, read_manifest, MANIFEST};

fn txloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_txloc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = txloc(args);
    assert!(
        out.status.success(),
        "txloc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary JSON on stdout")
}

fn write_config(dir: &Path, cfg: Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn tiny() -> Value {
    let quick = json!({"epochs": 1, "batch_size": 4});
    json!({
        "samples": {"train": 16, "val": 4, "test": 6},
        "train": {"sen2peak": quick, "detector": quick, "predpower": quick, "subtractnet": quick},
        "sweep": {"num_tx": [1, 3], "density": [0.04, 0.06]}
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_requested_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"samples": {"train": 100, "val": 0, "test": 3}, "field": {"num_intruders": 5}}),
    );
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--seed", "4", "--out", s(&data)]);
    let (m, samples) = load_split(&data.join("train")).unwrap();
    assert_eq!(m.num_samples, 100);
    assert_eq!(m.field.num_intruders, Count::Fixed(5));
    assert!(samples.iter().all(|x| x.scene.intruders().count() == 5));
    assert!(!data.join("val").exists());
    let test = read_manifest(&data.join("test")).unwrap();
    assert!(layouts_disjoint(&m.layout, &test.layout));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"samples": {"train": 20, "val": 2, "test": 2}}));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["generate", "--config", s(&cfg), "--seed", "9", "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "9", "--out", s(&b)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "10", "--out", s(&c)]);
    for split in ["train", "val", "test"] {
        for f in fs::read_dir(a.join(split)).unwrap() {
            let name = f.unwrap().file_name();
            assert_eq!(
                fs::read(a.join(split).join(&name)).unwrap(),
                fs::read(b.join(split).join(&name)).unwrap(),
                "{split}/{name:?}"
            );
        }
    }
    assert_ne!(
        fs::read(a.join("train/00000.readings.f32")).unwrap(),
        fs::read(c.join("train/00000.readings.f32")).unwrap()
    );
}

#[test]
fn density_sweep_writes_one_manifest_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), tiny());
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data), "--sweep", "density"]);
    let train = read_manifest(&data.join("train")).unwrap();
    let mut cells = Vec::new();
    for d in [0.04, 0.06] {
        let m = read_manifest(&data.join(format!("test-density-{d}"))).unwrap();
        assert_eq!(m.layout.len(), (d * 10_000.0) as usize);
        assert!(layouts_disjoint(&train.layout, &m.layout));
        cells.push(m.sweep.unwrap().value);
    }
    assert_eq!(cells, vec![0.04, 0.06]);
    assert!(!data.join("test").join(MANIFEST).exists());
}

fn report_rows(dir: &Path) -> Vec<ReportRow> {
    csv::Reader::from_path(dir.join("report.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn train_eval_plot_round() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c["samples"]["train"] = json!(64);
    let cfg = write_config(dir.path(), c);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data), "--sweep", "num_tx"]);
    let trained = ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&run)]);
    assert_eq!(trained["checkpoints"].as_array().unwrap().len(), 3);
    for name in ["sen2peak", "detector", "predpower"] {
        assert!(run.join(format!("{name}.safetensors")).exists());
        let curve = fs::read_to_string(run.join(format!("{name}.loss.csv"))).unwrap();
        assert!(curve.starts_with("epoch,train_loss,val_loss\n"), "{curve}");
    }

    // retraining with the same seed reproduces the loss curve
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&again), "--model", "sen2peak"]);
    assert_eq!(
        fs::read_to_string(run.join("sen2peak.loss.csv")).unwrap(),
        fs::read_to_string(again.join("sen2peak.loss.csv")).unwrap()
    );

    // a 64-sample localizer may find nothing; fitting on it must fail cleanly
    let attempt = txloc(&["power-fit", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&run), "--out", s(&run)]);
    if !attempt.status.success() {
        assert_eq!(error_of(&attempt)["error"]["kind"], "empty_dataset");
    }
    let fit = ok(&["power-fit", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&run), "--out", s(&run), "--oracle"]);
    assert!(fit["records"].as_u64().unwrap() > 0);
    assert!(run.join("correction.json").exists());

    let report = dir.path().join("report");
    ok(&[
        "eval", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&run), "--sweep", "num_tx", "--out",
        s(&report), "--threshold-px", "5", "--conf", "0.5", "--nms", "0.5",
    ]);
    let rows = report_rows(&report);
    let cells: Vec<(String, f64)> = rows.iter().map(|r| (r.variant.clone(), r.value)).collect();
    assert_eq!(
        cells,
        vec![
            ("detector".to_string(), 1.0),
            ("simplepeak".to_string(), 1.0),
            ("detector".to_string(), 3.0),
            ("simplepeak".to_string(), 3.0)
        ]
    );
    assert!(rows.iter().all(|r| r.n == 6 && r.latency_s > 0.0 && r.sweep_param == "num_tx"));
    let json_rows: Vec<ReportRow> = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json_rows, rows);

    let only = dir.path().join("only");
    ok(&["eval", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&run), "--sweep", "num_tx", "--variant", "simplepeak", "--out", s(&only)]);
    assert!(report_rows(&only).iter().all(|r| r.variant == "simplepeak"));

    let figs = dir.path().join("figs");
    let dump = report.join("errors-detector-num_tx-3.csv");
    let plotted = ok(&["plot", "--out", s(&figs), s(&report.join("report.csv")), s(&dump)]);
    let names: Vec<&str> = plotted["figures"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(names.len(), 3);
    for n in names {
        assert!(fs::read_to_string(n).unwrap().starts_with("<svg"));
    }
}

#[test]
fn oracle_eval_is_error_free() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), tiny());
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let report = dir.path().join("report");
    ok(&["eval", "--config", s(&cfg), "--dataset", s(&data), "--oracle", "--out", s(&report)]);
    let rows = report_rows(&report);
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert_eq!((r.variant.as_str(), r.l_err, r.miss_rate, r.false_alarm_rate, r.p_err), ("oracle", Some(0.0), 0.0, 0.0, Some(0.0)));
}

#[test]
fn cross_trained_steps_compose() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = tiny();
    b["propagation"] = json!({"model": {"alpha": 3.0, "shadow_sigma": 2.0, "reference_distance": 1.0}, "noise_floor": -80.0, "pixel_size": 10.0});
    let cfg_a = write_config(dir.path(), tiny());
    let cfg_b = dir.path().join("b.json");
    fs::write(&cfg_b, b.to_string()).unwrap();
    let (data_a, data_b) = (dir.path().join("A"), dir.path().join("B"));
    let (run_a, run_b) = (dir.path().join("runA"), dir.path().join("runB"));
    ok(&["generate", "--config", s(&cfg_a), "--out", s(&data_a)]);
    ok(&["generate", "--config", s(&cfg_b), "--out", s(&data_b), "--seed", "1"]);
    ok(&["train", "--config", s(&cfg_a), "--dataset", s(&data_a), "--out", s(&run_a), "--model", "sen2peak"]);
    ok(&["train", "--config", s(&cfg_b), "--dataset", s(&data_b), "--out", s(&run_b), "--model", "sen2peak,detector"]);
    let report = dir.path().join("combo");
    ok(&[
        "eval", "--config", s(&cfg_a), "--dataset", s(&data_a), "--checkpoint", s(&run_a.join("sen2peak.safetensors")),
        "--checkpoint", s(&run_b.join("detector.safetensors")), "--variant", "detector", "--out", s(&report),
    ]);
    assert_eq!(report_rows(&report).len(), 1);
}

fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr not empty");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

#[test]
fn failures_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = txloc(&["eval", "--dataset", s(&dir.path().join("missing")), "--oracle", "--out", s(dir.path())]);
    assert!(!out.status.success());
    let e = error_of(&out);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("manifest"));

    let bad = write_config(dir.path(), json!({"field": {"sensor_density": 2.0}}));
    let out = txloc(&["generate", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(error_of(&out)["error"]["kind"], "config");

    let out = txloc(&["eval", "--variant", "nope", "--dataset", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"]["kind"], "usage");

    let out = txloc(&["train", "--dataset", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert!(!out.status.success());
    error_of(&out);
}
