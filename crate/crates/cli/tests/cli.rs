use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ccflow-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ccflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_all_outputs() {
    let out = scratch("simulate");
    let o = ccflow(&["simulate", "--scenario", "gtp_s"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "controls.csv", "supply.csv", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let supply = std::fs::read_to_string(out.join("supply.csv")).unwrap();
    assert!(supply.starts_with("t,S,mean,bound,pressure"));
    let s = summary(&out);
    assert_eq!(s["command"], "simulate");
    assert!(s["objective"]["total"].as_f64().unwrap().is_finite());
}

#[test]
fn fptd_reports_risk_and_feasibility() {
    let out = scratch("fptd");
    let o = ccflow(&["fptd", "--scenario", "table1", "--mc"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    let risk = s["risk"].as_f64().unwrap();
    assert!((risk - 0.148).abs() < 2e-3, "{risk}");
    assert!(s["mc_risk"].as_f64().unwrap() > 0.1);
    assert!(out.join("fptd.csv").is_file());
}

#[test]
fn missing_scenario_exits_with_one() {
    let out = scratch("missing");
    let o = ccflow(&["simulate", "--scenario", "no_such_scenario"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_scenario"));
}

#[test]
fn failed_validation_exits_with_two() {
    let out = scratch("validate");
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/gtp_s.toml"),
    )
    .unwrap();
    let text = format!("{text}\n[validation]\ngradient_tolerance = 1e-300\n");
    let path = out.join("strict.toml");
    std::fs::write(&path, text).unwrap();
    let o = ccflow(&["validate", "--scenario", path.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&out)["passed"], false);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
