//! End-to-end runs of the command line tool.

use std::process::Command;

fn beamtrack(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_beamtrack")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn calibrate_prints_balanced_thresholds() {
    let out = String::from_utf8(beamtrack(&["calibrate", "--max-size", "4"]).stdout).unwrap();
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "size,eta,p_corr,p_md,p_fa,p_wrong");
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        let f: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[3] - f[4]).abs() < 1e-8);
    }
}

#[test]
fn simulate_then_report_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let a_s = a.to_str().unwrap();
    beamtrack(&["simulate", "--episodes", "20", "--belief-set-size", "40", "--policy", "exos", "--policy", "er-mdp", "--out-dir", a_s]);
    let manifest = a.join("manifest.json");
    let out = beamtrack(&["report", "--manifest", manifest.to_str().unwrap(), "--out-dir", b.to_str().unwrap()]);
    let log = String::from_utf8(out.stderr).unwrap();
    assert!(log.contains("metrics.csv: identical"), "{log}");
    assert!(!log.contains("differs"), "{log}");
    for f in ["metrics.csv", "episodes_exos.csv", "episodes_er_mdp.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn build_scenario_and_optimize() {
    let dir = tempfile::tempdir().unwrap();
    let sec = dir.path().join("sectors.csv");
    let out = beamtrack(&["build-scenario", "--preset", "t-shaped", "--rho-draws", "5", "--out", sec.to_str().unwrap()]);
    assert!(String::from_utf8(out.stderr).unwrap().contains("active SBPIs 17"));
    assert!(std::fs::read_to_string(&sec).unwrap().lines().count() > 17);
    let pol = dir.path().join("mdp.json");
    beamtrack(&["optimize", "--policy", "mdp", "--out", pol.to_str().unwrap()]);
    let f = std::fs::File::open(&pol).unwrap();
    assert_eq!(beamtrack::mdp::MdpPolicy::load(f).unwrap().n_states(), 15);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "policy = \"genie\"\nmodel_source = \"learned\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_beamtrack"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("genie"));
}
