use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scalehom"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn scalehom")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("scalehom-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn body(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn ladder_check_passes() {
    let dir = scratch("ladder");
    let o = run(&["ladder-check", "--out", dir.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = body(&dir.join("ladder-check.csv"));
    assert!(csv.starts_with("# scalehom "));
    assert!(csv.contains("# seed: 7"));
    assert!(csv.contains("level,L,lambda,tau"));
    let js: serde_json::Value = serde_json::from_str(&body(&dir.join("ladder-check.json"))).unwrap();
    assert_eq!(js["passed"], serde_json::Value::Bool(true));
    assert!(stderr(&o).contains("PASS ode-matches-closed-form"));
}

#[test]
fn csv_to_stdout_without_out_dir() {
    let o = run(&["envelope-integrals"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("tau_star,p,epsilon,i1"));
}

#[test]
fn unknown_parameter_is_named() {
    let o = run(&["aniso-flow", "--set", "quad_ordr=64"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("quad_ordr"), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = scratch("badcfg");
    let p = dir.join("c.json");
    fs::write(&p, r#"{"experiment": "ladder-check", "sead": 1}"#).unwrap();
    let o = run(&["ladder-check", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sead"));
    fs::write(&p, r#"{"experiment": "lyapunov"}"#).unwrap();
    let o = run(&["ladder-check", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["no-such-experiment"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["ladder-check", "--seed", "-3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_value_is_parameter_error() {
    let o = run(&["ladder-check", "--set", "epsilon=2.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epsilon"));
}

#[test]
fn failed_check_exits_two() {
    let o = run(&["ladder-check", "--set", "ode_steps=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("FAIL ode-matches-closed-form"));
}

#[test]
fn resource_abort_exits_three() {
    let o = run(&[
        "slflow-moments",
        "--set",
        "paths=100000000",
        "--set",
        "tau_end=1000",
        "--set",
        "snapshots=[]",
        "--set",
        "intermittency_taus=[]",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn config_file_round_trip_and_determinism() {
    let dir = scratch("det");
    let o = run(&["particle-msd", "--T-list", "20,40", "--paths", "8", "--fields", "2", "--grid-M", "8", "--seed", "11", "--print-config"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, &o.stdout).unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    for d in [&a, &b] {
        let o = run(&["particle-msd", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", stderr(&o));
    }
    let csv = body(&a.join("particle-msd.csv"));
    assert_eq!(csv, body(&b.join("particle-msd.csv")));
    assert!(csv.contains("# seed: 11"));
    assert!(csv.contains("\"T_list\":[20.0,40.0]"));
    let o = run(&["particle-msd", "--config", cfg.to_str().unwrap(), "--seed", "12", "--out", b.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)));
    assert_ne!(csv, body(&b.join("particle-msd.csv")));
}

#[test]
fn aniso_flags_reach_the_experiment() {
    let o = run(&["aniso-flow", "--n", "3", "--a0", "2,1,0.5", "--tau-end", "5", "--quad-order", "12", "--dtau", "0.05"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("tau,mu0,mu1,mu2,distance"));
    assert!(out.contains("\"quad_order\":12"));
}
