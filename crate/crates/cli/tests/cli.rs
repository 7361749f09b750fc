use std::fs;
use std::path::Path;

use optsensor_cli::{run, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("optsensor").chain(args.iter().copied()))
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

const DIAGONAL: &str = r#"{"A":{"rows":2,"cols":2,"data":[-1,0,0,-2]},"gamma":0.1,"p":1}"#;

#[test]
fn selftest_passes() {
    assert_eq!(cli(&["selftest"]), EXIT_OK);
}

#[test]
fn design_on_diagonal_instance_picks_first_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.json", DIAGONAL);
    let out = dir.path().join("out");
    let code = cli(&["design", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("design.json")).unwrap()).unwrap();
    let c: Vec<f64> = v["c"]["data"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!((c[0] - 1.0).abs() < 1e-8 && c[1].abs() < 1e-8, "{c:?}");
    assert_eq!(v["census_agrees"], true);
}

#[test]
fn actuator_mode_only_relabels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.json", DIAGONAL);
    let s = dir.path().join("s");
    let a = dir.path().join("a");
    assert_eq!(
        cli(&["design", "--config", &cfg, "--out", s.to_str().unwrap()]),
        0
    );
    assert_eq!(
        cli(&[
            "design",
            "--mode",
            "actuator",
            "--config",
            &cfg,
            "--out",
            a.to_str().unwrap()
        ]),
        0
    );
    let read = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("design.json")).unwrap()).unwrap()
    };
    let (vs, va) = (read(&s), read(&a));
    assert_eq!(vs["c"], va["c"]);
    assert_eq!(vs["J"], va["J"]);
    assert_eq!(va["role"], "actuator");
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        "{\"A\": {\"rows\": 2,\n \"cols\": 2, \"data\": [1, 2,]}}",
    );
    assert_eq!(cli(&["design", "--config", &cfg]), EXIT_VALIDATION);
    let missing = dir.path().join("missing.json");
    assert_eq!(
        cli(&["enumerate", "--config", missing.to_str().unwrap()]),
        EXIT_VALIDATION
    );
    assert_eq!(cli(&["fig1", "--format", "xml"]), EXIT_VALIDATION);
    let unstable = write(
        dir.path(),
        "u.json",
        r#"{"A":{"rows":1,"cols":1,"data":[1]},"gamma":0.1,"p":1}"#,
    );
    assert_eq!(cli(&["design", "--config", &unstable]), EXIT_VALIDATION);
}

#[test]
fn solver_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // repeated eigenvalues of M0 make the extremal enumeration degenerate
    let cfg = write(
        dir.path(),
        "d.json",
        r#"{"A":{"rows":2,"cols":2,"data":[-1,0,0,-1]},"gamma":0.1,"p":1}"#,
    );
    assert_eq!(cli(&["enumerate", "--config", &cfg]), EXIT_SOLVER);
}

fn run_experiment(which: &str, dir: &Path, cfg: &str) -> String {
    let out = dir.join(format!("{which}-{}", fs::read_dir(dir).unwrap().count()));
    let code = cli(&[
        which,
        "--config",
        cfg,
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out.join(format!("{which}_manifest.json"))).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["master_seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    fs::read_to_string(out.join(format!("{which}.csv"))).unwrap()
}

#[test]
fn fig1_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "f1.json",
        r#"{"n":4,"p":1,"Q_spec":"half_identity","L_spec":"identity","margins":[0.5,3],
            "gamma_grid":[0.01,1,3],"n_samples":8,"master_seed":0}"#,
    );
    let a = run_experiment("fig1", dir.path(), &cfg);
    let b = run_experiment("fig1", dir.path(), &cfg);
    assert!(a.starts_with("experiment,margin,gamma,statistic,stderr,n_effective\n"));
    assert_eq!(a.lines().count(), 1 + 2 * 3);
    assert_eq!(a, b);
}

#[test]
fn fig2_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "f2.json",
        r#"{"n":6,"p":1,"Q_spec":"identity_over_sqrt_n","L_spec":"identity","margins":[0.5],
            "gamma_grid":[0.1,1.0],"n_samples":4,"master_seed":0}"#,
    );
    let a = run_experiment("fig2", dir.path(), &cfg);
    let b = run_experiment("fig2", dir.path(), &cfg);
    assert_eq!(a.lines().count(), 1 + 2 * 2);
    assert_eq!(a, b);
}

#[test]
fn flow_and_gammastar_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.json", DIAGONAL);
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(
        cli(&["flow", "--config", &cfg, "--seed", "3", "--out", o]),
        0
    );
    let trace = fs::read_to_string(out.join("flow.csv")).unwrap();
    assert!(trace.starts_with("iteration,J,grad_norm,step\n"));
    assert_eq!(
        cli(&[
            "gammastar",
            "--gamma-max",
            "1",
            "--config",
            &cfg,
            "--out",
            o
        ]),
        0
    );
    assert!(out.join("gammastar.json").exists());
}

#[test]
fn verify_kalman_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let o = out.to_str().unwrap();
    assert_eq!(
        cli(&["verify-kalman", "--samples", "4", "--path-csv", "--out", o]),
        0
    );
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("kalman.json")).unwrap()).unwrap();
    assert_eq!(v["paths"], 4);
    let paths = fs::read_to_string(out.join("kalman_paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 5);
    assert_eq!(cli(&["verify-kalman", "--path-csv"]), EXIT_VALIDATION);
}
