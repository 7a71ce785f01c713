use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pwlpid::cli::RunConfig;

fn pwlpid(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwlpid"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

#[test]
fn approx_writes_segment_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["approx", "--plant", "example2", "--cells", "6"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("segments.csv"));
    let slopes: Vec<f64> = rows.iter().map(|r| r[3]).collect();
    for (got, want) in slopes.iter().zip([-0.19, -0.42, -0.19, 1.19, 1.42, 1.19]) {
        assert!((got - want).abs() <= 0.005);
    }
    let cert: serde_json::Value = serde_json::from_str(&read(&dir.path().join("certificate.json"))).unwrap();
    let coarse = cert["certificate"]["sup_error_measured"].as_f64().unwrap();

    let fine_dir = tempfile::tempdir().unwrap();
    assert!(pwlpid(&["approx", "--cells", "48"], fine_dir.path()).status.success());
    let cert: serde_json::Value = serde_json::from_str(&read(&fine_dir.path().join("certificate.json"))).unwrap();
    let fine = cert["certificate"]["sup_error_measured"].as_f64().unwrap();
    // On fine grids the error approaches width^2 / 8 * max|f''| = 0.125^2 / 8 * 2.
    let asymptotic = 0.125f64.powi(2) / 8.0 * 2.0;
    assert!((fine - asymptotic).abs() < 0.02 * asymptotic, "{fine}");
    // The unit-width grid is still pre-asymptotic, so the gain over it is about 33, not 64.
    assert!(fine < coarse / 25.0, "{coarse} -> {fine}");
}

#[test]
fn identity_expression_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["approx", "--expr", "y", "--cells", "4"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for r in csv_rows(&dir.path().join("segments.csv")) {
        assert!((r[3] - 1.0).abs() < 1e-12);
    }
    let cert: serde_json::Value = serde_json::from_str(&read(&dir.path().join("certificate.json"))).unwrap();
    assert!(cert["certificate"]["sup_error_measured"].as_f64().unwrap() < 1e-12);
    assert_eq!(cert["lipschitz_is_estimate"], true);
}

#[test]
fn zero_gains_give_zero_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["simulate", "--plant", "example1", "--gains", "0", "0", "0"], dir.path());
    assert!(o.status.success());
    let text = read(&dir.path().join("trajectory.csv"));
    assert_eq!(text.lines().next().unwrap(), "t,y,dy,u,e");
    assert!(csv_rows(&dir.path().join("trajectory.csv")).iter().all(|r| r[1] == 0.0));
}

#[test]
fn simulate_example2_settles_and_writes_paper_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["simulate", "--plant", "example2", "--gains", "4.65", "10", "0", "--paper-model"], dir.path());
    assert!(o.status.success());
    for name in ["trajectory.csv", "trajectory_paper_model.csv"] {
        let rows = csv_rows(&dir.path().join(name));
        assert!((rows.last().unwrap()[1] - 1.0).abs() <= 0.01);
    }
    let cost: serde_json::Value = serde_json::from_str(&read(&dir.path().join("cost.json"))).unwrap();
    assert!(cost["cost"]["j"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pwlpid(&["simulate", "--dt", "0.01"], dir.path()).status.code(), Some(2));
    assert_eq!(pwlpid(&["simulate", "--bounds", "5", "1"], dir.path()).status.code(), Some(2));
    assert_eq!(pwlpid(&["simulate", "--plant", "nope"], dir.path()).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        pwlpid(&["simulate", "--config", missing.to_str().unwrap()], dir.path()).status.code(),
        Some(4)
    );
    let o = pwlpid(&["simulate", "--expr", "-50*y", "--gains", "0", "1", "0"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    // The trajectory up to the failure is still written.
    assert!(csv_rows(&dir.path().join("trajectory.csv")).len() > 10);
}

#[test]
fn tune_init_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["tune", "--swarm", "2", "--iters", "0", "--T", "2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&read(&dir.path().join("tune_report.json"))).unwrap();
    assert_eq!(r["evaluations"], 2);
    assert_eq!(r["history"].as_array().unwrap().len(), 1);
}

#[test]
fn reruns_are_byte_identical_and_configs_reload() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["tune", "--plant", "example2", "--swarm", "8", "--iters", "3", "--seed", "5", "--T", "4"];
    assert!(pwlpid(&args, a.path()).status.success());
    assert!(pwlpid(&args, b.path()).status.success());
    for name in ["tune_history.csv", "best_trajectory.csv"] {
        assert_eq!(read(&a.path().join(name)), read(&b.path().join(name)), "{name}");
    }

    // Echoed config reloads to the same RunConfig and reproduces the run.
    let report: serde_json::Value = serde_json::from_str(&read(&a.path().join("tune_report.json"))).unwrap();
    let echoed: RunConfig = serde_json::from_value(report["run_config"].clone()).unwrap();
    let file = RunConfig::from_json(&read(&a.path().join("config.json"))).unwrap();
    assert_eq!(echoed, file);
    let c = tempfile::tempdir().unwrap();
    let cfg_path = a.path().join("config.json");
    let o = pwlpid(&["tune", "--config", cfg_path.to_str().unwrap()], c.path());
    assert!(o.status.success());
    assert_eq!(read(&a.path().join("tune_history.csv")), read(&c.path().join("tune_history.csv")));
    let rerun: serde_json::Value = serde_json::from_str(&read(&c.path().join("tune_report.json"))).unwrap();
    assert_eq!(report["history"], rerun["history"]);
    assert_eq!(report["best_gains"], rerun["best_gains"]);
}

#[test]
fn converge_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["converge", "--plant", "example2", "--h", "6", "12", "24", "48"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("convergence.csv"));
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[1][3] < w[0][3]);
        let ratio = w[0][2] / w[1][2];
        assert!(ratio > 4.0 / 1.5 * 0.9 && ratio < 4.0 * 1.5, "eps_f ratio {ratio}");
    }

    let affine = tempfile::tempdir().unwrap();
    let o = pwlpid(&["converge", "--expr", "2*y", "--h", "6", "12"], affine.path());
    assert!(o.status.success());
    for r in csv_rows(&affine.path().join("convergence.csv")) {
        assert!(r[3] < 1e-8);
    }
    assert_eq!(pwlpid(&["converge", "--h", "12", "6"], affine.path()).status.code(), Some(2));
}

#[test]
fn presets_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = pwlpid(&["example1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let base: serde_json::Value = serde_json::from_str(&read(&dir.path().join("baseline/cost.json"))).unwrap();
    let tuned: serde_json::Value = serde_json::from_str(&read(&dir.path().join("tune/tune_report.json"))).unwrap();
    assert!(tuned["best_cost"].as_f64().unwrap() < base["cost"]["j"].as_f64().unwrap());
    assert_eq!(tuned["run_config"]["pso"]["iterations"], 5);
}
