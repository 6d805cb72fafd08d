use std::path::Path;
use std::process::{Command, Output};

const STATE_FLAGS: [&str; 6] = [
    "--states",
    "boost_pressure,egr_ratio",
    "--controls",
    "vgt_position,egr_valve",
    "--exogenous",
    "fuel_injection,engine_speed",
];

fn esindy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esindy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn generate_writes_all_channels_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = esindy(&["generate", "--seed", "4", "--horizon", "250", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "time,boost_pressure,egr_ratio,vgt_position,egr_valve,fuel_injection,engine_speed"
    );
    assert_eq!(lines.count(), 250);
}

#[test]
fn unknown_plant_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = esindy(&["generate", "--plant", "teapot", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("surrogate-airpath"));
}

#[test]
fn identify_then_evaluate_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    assert!(
        esindy(&["generate", "--seed", "2", "--horizon", "1500", "--out", p(&data)])
            .status
            .success()
    );
    let out = dir.path().join("run");
    let mut args = vec![
        "identify",
        "--method",
        "basic",
        "--lambda",
        "1",
        "--data",
        p(&data),
        "--out-dir",
        p(&out),
    ];
    args.extend(STATE_FLAGS);
    let o = esindy(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("report.json"));
    let one_step = floats(&report["r2_one_step"]);
    assert!(one_step.iter().all(|r| *r >= 0.95), "{one_step:?}");
    // file input without noise keeps no training copy
    assert!(!out.join("training.csv").exists());

    let metrics = dir.path().join("metrics.json");
    let traj = dir.path().join("traj.csv");
    let o = esindy(&[
        "evaluate",
        "--model",
        p(&out.join("model.json")),
        "--data",
        p(&data),
        "--metrics",
        p(&metrics),
        "--trajectory",
        p(&traj),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&metrics);
    for (a, b) in floats(&m["r2_one_step"]).iter().zip(&one_step) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in floats(&m["r2_long_term"]).iter().zip(floats(&report["r2_long_term"])) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(m["n_terms"], report["n_terms"]);
    let traj = std::fs::read_to_string(&traj).unwrap();
    assert!(traj.starts_with("time,boost_pressure_true,egr_ratio_true,boost_pressure_pred,egr_ratio_pred\n"));
    // window of sigma_x + 1 = 2 samples is consumed as initial condition
    assert_eq!(traj.lines().count(), 1 + 1500 - 2);
}

#[test]
fn unreachable_gate_exits_with_no_model_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = esindy(&[
        "identify",
        "--r2-gate",
        "0.9999999999",
        "--lambda-init",
        "1000",
        "--max-iterations",
        "32",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn too_short_record_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("short.csv");
    assert!(esindy(&["generate", "--horizon", "2", "--out", p(&data)])
        .status
        .success());
    let mut args = vec![
        "identify",
        "--method",
        "basic",
        "--data",
        p(&data),
        "--out-dir",
        p(dir.path()),
    ];
    args.extend(STATE_FLAGS);
    let o = esindy(&args);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('3') && err.contains('2'), "{err}");
}

#[test]
fn missing_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    assert!(esindy(&["generate", "--horizon", "50", "--out", p(&data)])
        .status
        .success());
    let o = esindy(&[
        "identify",
        "--data",
        p(&data),
        "--states",
        "boost_pressure,turbo_speed",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("turbo_speed"));
}

#[test]
fn sweep_first_row_matches_identify() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--seed", "6", "--method", "basic", "--lambda", "1"];
    let mut ident = vec!["identify", "--eta", "0.05", "--out-dir", p(dir.path())];
    ident.extend(common);
    assert!(esindy(&ident).status.success());
    let report = json(&dir.path().join("report.json"));

    let sweep = dir.path().join("sweep.csv");
    let mut args = vec!["sweep-noise", "--eta", "0.05,0.1", "--out", p(&sweep)];
    args.extend(common);
    let o = esindy(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&sweep).unwrap();
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(&rows[0][col("status")], "ok");
    let long = floats(&report["r2_long_term"]);
    assert_eq!(
        rows[0][col("long_term_r2_boost_pressure")].parse::<f64>().unwrap(),
        long[0]
    );
    assert_eq!(rows[0][col("long_term_r2_egr_ratio")].parse::<f64>().unwrap(), long[1]);
    assert_eq!(rows[0][col("n_terms")], report["n_terms"].to_string());
}

#[test]
fn negative_noise_level_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = esindy(&["sweep-noise", "--eta", "0.1,-0.2", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = esindy(&["identify", "--eta=-0.1", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(configs).unwrap() {
        let path = entry.unwrap().path();
        let cfg = esindy::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
    }
}
