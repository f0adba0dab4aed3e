use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn peerrace(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peerrace"))
        .args(args)
        .current_dir(dir)
        .env("PEERRACE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Vec<Value> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const DATA: [&str; 6] = [
    "--network",
    "d/network.txt",
    "--covariates",
    "d/covariates.csv",
    "--outcomes",
    "d/outcomes.csv",
];

#[test]
fn simulate_then_estimate_covers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = peerrace(&["simulate", "--out-dir", "d", "--seed", "11", "--delta", "0.5"], dir.path());
    assert!(sim.status.success());
    for f in ["network.txt", "covariates.csv", "outcomes.csv", "theta.json"] {
        assert!(dir.path().join("d").join(f).exists(), "{f} missing");
    }
    let mut args = vec!["estimate"];
    args.extend(DATA);
    args.extend(["--method", "exp,ols"]);
    let recs = stdout_json(&peerrace(&args, dir.path()));
    assert_eq!(recs.len(), 2);
    let exp = &recs[0];
    assert_eq!(exp["method"], "exp");
    assert_eq!(exp["converged"], true);
    let truth = [1.0, 0.5, 0.5];
    for (k, t) in truth.iter().enumerate() {
        let lo = exp["ci_lower"][k].as_f64().unwrap();
        let hi = exp["ci_upper"][k].as_f64().unwrap();
        assert!(lo <= *t && *t <= hi, "parameter {k}: {t} outside [{lo}, {hi}]");
    }
    assert_eq!(recs[1]["method"], "ols");
}

#[test]
fn simulation_on_given_data_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("net.txt"), "n 3\n0 1\n1 2\n").unwrap();
    fs::write(dir.path().join("x.csv"), "id,x1\n0,0.1\n1,-0.2\n2,0.3\n").unwrap();
    fs::write(dir.path().join("theta.json"), r#"{"beta":[0.5],"delta":1.0}"#).unwrap();
    let out = peerrace(
        &["simulate", "--out-dir", "d", "--network", "net.txt", "--covariates", "x.csv", "--theta", "theta.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(dir.path().join("d/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("id,time,outcome"));
    assert_eq!(traj.lines().count(), 4);
}

#[test]
fn malformed_covariate_row_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("d")).unwrap();
    fs::write(dir.path().join("d/network.txt"), "n 3\n0 1\n").unwrap();
    fs::write(dir.path().join("d/covariates.csv"), "id,x1\n0,0.5\n1,abc\n2,0.1\n").unwrap();
    fs::write(dir.path().join("d/outcomes.csv"), "id,y\n0,1\n1,0\n2,0\n").unwrap();
    let mut args = vec!["estimate"];
    args.extend(DATA);
    let out = peerrace(&args, dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("covariates.csv:3"), "stderr: {err}");
}

#[test]
fn complete_homogeneous_components_warn() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("d")).unwrap();
    let mut net = String::from("n 30\n");
    let mut x = String::from("id,x1\n");
    let mut y = String::from("id,y\n");
    for b in 0..10 {
        let base = 3 * b;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            net.push_str(&format!("{} {}\n", base + i, base + j));
        }
        for k in 0..3 {
            x.push_str(&format!("{},{}\n", base + k, b as f64 / 10.0 - 0.5));
            y.push_str(&format!("{},{}\n", base + k, ((b + k) % 2 == 0) as u8));
        }
    }
    fs::write(dir.path().join("d/network.txt"), net).unwrap();
    fs::write(dir.path().join("d/covariates.csv"), x).unwrap();
    fs::write(dir.path().join("d/outcomes.csv"), y).unwrap();
    let mut args = vec!["estimate"];
    args.extend(DATA);
    args.extend(["--method", "ols"]);
    let out = peerrace(&args, dir.path());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warning:") && err.contains("not distinguishable"), "stderr: {err}");
}

#[test]
fn estimand_records_have_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let recs = stdout_json(&peerrace(&["estimand", "prob-delta", "--lambda", "1", "--lambda-plus", "2"], dir.path()));
    let r = &recs[0];
    for key in ["kind", "value", "mc_se", "budget", "seed"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    let expected = (-1.0f64).exp() * (1.0 - (-1.0f64).exp());
    assert!((r["value"].as_f64().unwrap() - expected).abs() < 1e-15);

    fs::write(dir.path().join("net.txt"), "n 2\n0 1\n").unwrap();
    fs::write(dir.path().join("x.csv"), "id,x1\n0,0\n1,0\n").unwrap();
    fs::write(dir.path().join("theta.json"), r#"{"beta":[0.0],"delta":0.0}"#).unwrap();
    let args = [
        "estimand", "time-to-fraction", "--network", "net.txt", "--covariates", "x.csv", "--theta", "theta.json",
        "--q", "1", "--budget", "500", "--seed", "4",
    ];
    let a = stdout_json(&peerrace(&args, dir.path()));
    let b = stdout_json(&peerrace(&args, dir.path()));
    assert_eq!(a, b);
    assert_eq!(a[0]["seed"], 4);
    assert_eq!(a[0]["budget"], 500);
}

#[test]
fn infeasible_dyad_probabilities_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = peerrace(&["estimand", "recover-dyad", "--p00", "0.2", "--p10", "0.6"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn experiment_config_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cell.toml"),
        "design = \"block\"\ngroup_size = 5\nn_total = 100\ndelta = 0.5\nreplications = 50\nestimators = [\"ols\"]\n",
    )
    .unwrap();
    let out = peerrace(&["experiment", "--config", "cell.toml", "--replications", "3", "--csv", "rows.csv"], dir.path());
    let report = &stdout_json(&out)[0];
    assert_eq!(report["config"]["replications"], 3);
    let csv = fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    for col in ["n_b", "delta", "param", "estimator", "bias", "sd", "rmse"] {
        assert!(header.contains(&col), "missing column {col}");
    }

    fs::write(dir.path().join("bad.toml"), "design = \"block\"\ngroup_size = 5\ndelta = 0\nreplicate = 3\n").unwrap();
    let bad = peerrace(&["experiment", "--config", "bad.toml"], dir.path());
    assert!(!bad.status.success());
}
