use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn efigp(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_efigp")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "efigp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_infer_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let result = dir.path().join("result.json");
    let metrics = dir.path().join("metrics.json");

    efigp(&["simulate", "--system", "fn", "--seed", "3", "--out", path(&data)]);
    let csv = fs::read_to_string(&data).unwrap();
    assert!(csv.lines().any(|l| l == "t,comp,value"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 41);

    efigp(&[
        "infer",
        "--data",
        path(&data),
        "--system",
        "fn",
        "--disc",
        "81",
        "--eigen",
        "41",
        "--fourier",
        "11",
        "--max-iters",
        "3000",
        "--out",
        path(&result),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    assert_eq!(json["theta_hat"].as_array().unwrap().len(), 3);
    assert_eq!(json["x_hat"][0].as_array().unwrap().len(), 81);

    efigp(&[
        "evaluate",
        "--result",
        path(&result),
        "--system",
        "fn",
        "--out",
        path(&metrics),
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m["rmse_combined"][0].as_f64().unwrap().is_finite());
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 2561);
    assert!(traj.starts_with("t,"));
}

#[test]
fn evaluate_accepts_what_if_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let result = dir.path().join("result.json");
    let metrics = dir.path().join("metrics.json");
    efigp(&["simulate", "--system", "fn", "--out", path(&data)]);
    efigp(&[
        "infer",
        "--data",
        path(&data),
        "--system",
        "fn",
        "--disc",
        "41",
        "--max-iters",
        "10",
        "--out",
        path(&result),
    ]);
    efigp(&[
        "evaluate",
        "--result",
        path(&result),
        "--system",
        "fn",
        "--theta",
        "0.2,0.2,3",
        "--x0",
        "-1,1",
        "--out",
        path(&metrics),
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    for r in m["rmse_combined"].as_array().unwrap() {
        assert!(r.as_f64().unwrap() < 1e-3);
    }
}

#[test]
fn benchmark_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("matrix.json");
    fs::write(
        &config,
        r#"{"experiments": [{"system": "lv", "discretization": 41, "method": "efigp", "seeds": [0, 1],
            "optimizer": {"max_iters": 500}}]}"#,
    )
    .unwrap();
    let out = dir.path().join("report");
    efigp(&["benchmark", "--config", path(&config), "--out", path(&out)]);
    for f in [
        "runs.csv",
        "rmse.csv",
        "param_error.csv",
        "runtime.csv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("runs.csv")).unwrap().lines().count(), 3);
}

#[test]
fn stabilize_reports_a_schedule_setting() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let out = dir.path().join("stable.json");
    efigp(&["simulate", "--system", "fn", "--out", path(&data)]);
    efigp(&[
        "stabilize",
        "--data",
        path(&data),
        "--system",
        "fn",
        "--disc",
        "81",
        "--schedule-eigen",
        "21,41",
        "--schedule-fourier",
        "11",
        "--max-iters",
        "1000",
        "--out",
        path(&out),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!([21, 41].contains(&v["eigen"].as_u64().unwrap()));
    assert_eq!(v["fourier"].as_u64().unwrap(), 11);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    fs::write(&data, "t,comp,value\n0,1,oops\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_efigp"))
        .args([
            "infer",
            "--data",
            path(&data),
            "--system",
            "fn",
            "--out",
            path(&dir.path().join("r.json")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
