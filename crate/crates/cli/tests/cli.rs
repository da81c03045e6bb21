use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn doublepass(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doublepass"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DOUBLEPASS_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const SMALL_TRAJECTORY: [&str; 7] = ["trajectory", "--f", "5", "--t-final", "0.05", "--dt", "1e-3"];

#[test]
fn trajectory_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = doublepass(&[&SMALL_TRAJECTORY[..], &["--out", "run"]].concat(), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("run/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,dW,dZ_single,dZ_double,pi_fz_single,pi_fz_double");
    assert_eq!(lines.count(), 51);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "trajectory");
    assert_eq!(manifest["config"]["master_seed"], 7);
    assert_eq!(manifest["config"]["f"], 5.0);
}

#[test]
fn no_drive_and_no_coupling_stays_flat() {
    let dir = tempfile::tempdir().unwrap();
    let o = doublepass(&[&SMALL_TRAJECTORY[..], &["--m", "0", "--k", "0", "--omega", "0", "--out", "flat"]].concat(), dir.path());
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("flat/trajectory.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(4).map(|c| c.parse().unwrap()).collect();
        assert!(cols.iter().all(|v| v.abs() < 1e-12), "{line}");
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&doublepass(&[&SMALL_TRAJECTORY[..], &["--out", out]].concat(), dir.path())), 0);
    }
    let a = fs::read(dir.path().join("a/trajectory.csv")).unwrap();
    let b = fs::read(dir.path().join("b/trajectory.csv")).unwrap();
    assert_eq!(a, b);
    let other = doublepass(&[&SMALL_TRAJECTORY[..], &["--seed", "8", "--out", "c"]].concat(), dir.path());
    assert_eq!(code(&other), 0);
    assert_ne!(a, fs::read(dir.path().join("c/trajectory.csv")).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[trajectory]\nf = 3.0\nt_final = 0.02\ndt = 1e-3\nmaster_seed = 11\n").unwrap();
    let o = doublepass(&["--config", "run.toml", "trajectory", "--f", "4", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["f"], 4.0);
    assert_eq!(manifest["config"]["master_seed"], 11);
    assert_eq!(manifest["config"]["t_final"], 0.02);
}

#[test]
fn config_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.toml"), "[trajectory]\nfrequency = 3.0\n").unwrap();
    fs::write(dir.path().join("section.toml"), "[trajectories]\nf = 3.0\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["--config", "typo.toml", "trajectory", "--out", "x"],
        &["--config", "section.toml", "trajectory", "--out", "x"],
        &["trajectory", "--f", "0.3", "--out", "x"],
        &["trajectory", "--dt", "0.5", "--out", "x"],
        &["crb-scan", "--f-values", "5000", "--realizations", "2", "--out", "x"],
        &["particle-scan", "--m", "1.0", "--out", "x"],
    ];
    for args in cases {
        let o = doublepass(args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!dir.path().join("x").exists());
    }
    let o = doublepass(&["trajectory", "--scheme", "rk4", "--out", "x"], dir.path());
    assert_eq!(code(&o), 2);
    let o = doublepass(&["trajectory", "--no-such-flag"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_doublepass"))
        .args(SMALL_TRAJECTORY)
        .current_dir(dir.path())
        .env("DOUBLEPASS_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("root/trajectory/manifest.json").is_file());
}

#[test]
fn verify_manifest_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let o = doublepass(
        &["crb-scan", "--f-values", "3,5,8", "--realizations", "3", "--dt", "1e-3", "--out", "crb"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["points.csv", "fit.json", "reference.csv", "realizations.csv", "manifest.json"] {
        assert!(dir.path().join("crb").join(f).is_file(), "{f}");
    }
    assert_eq!(code(&doublepass(&["verify-manifest", "crb"], dir.path())), 0);
    assert_eq!(code(&doublepass(&["verify-manifest", "crb", "--workers", "1"], dir.path())), 0);

    let path = dir.path().join("crb/points.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("0,0,0,0,0,0,0,0,,,,,\n");
    fs::write(&path, text).unwrap();
    let o = doublepass(&["verify-manifest", "crb"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("MISMATCH  points.csv"));
}

#[test]
fn refuses_to_overwrite_foreign_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("mine")).unwrap();
    fs::write(dir.path().join("mine/notes.txt"), "keep").unwrap();
    let o = doublepass(&[&SMALL_TRAJECTORY[..], &["--out", "mine"]].concat(), dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_to_string(dir.path().join("mine/notes.txt")).unwrap(), "keep");
}

#[test]
fn plots_are_optional_svg() {
    let dir = tempfile::tempdir().unwrap();
    let o = doublepass(&[&SMALL_TRAJECTORY[..], &["--out", "p", "--plot"]].concat(), dir.path());
    assert_eq!(code(&o), 0);
    let svg = fs::read_to_string(dir.path().join("p/trajectory.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("double pass"));
}

#[test]
fn bias_scan_writes_one_posterior_per_width() {
    let dir = tempfile::tempdir().unwrap();
    let o = doublepass(
        &["bias-scan", "--f-values", "10", "--d-values", "10,100", "--realizations", "2", "--np", "100", "--dt", "1e-3", "--out", "b"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("b/posterior_D1e1.csv").is_file());
    assert!(dir.path().join("b/posterior_D1e2.csv").is_file());
    let o = doublepass(&["bias-scan", "--f-values", "10,20", "--out", "b2"], dir.path());
    assert_eq!(code(&o), 2);
}
