use std::path::Path;
use std::process::{Command, Output};

fn oed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oed")).args(args).output().expect("binary runs")
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn tau_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = oed(&["tau", "--out", out]);
    assert!(o.status.success());
    assert_eq!(report(dir.path())["metrics"]["tau"], 3.0);
    let o = oed(&["tau", "--x0", "2", "--out", out]);
    assert!(o.status.success());
    assert_eq!(report(dir.path())["metrics"]["tau"], 1.5);
    let o = oed(&["budget", "1", "2", "--out", out]);
    assert!(o.status.success());
    let r = report(dir.path());
    assert_eq!((r["metrics"]["alpha1"].as_f64(), r["metrics"]["alpha2"].as_f64()), (Some(1.0), Some(0.0)));
    assert!(!oed(&["budget", "0", "2", "--out", out]).status.success());
    assert!(!oed(&["tau", "--z0", "1.5", "--out", out]).status.success());
}

#[test]
fn linear2d_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = oed(&["linear2d", "--iters", "3", "--step", "0.05", "--seed", "17", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["seed"], 17);
    assert_eq!(r["config"]["linear2d"]["iterations"], 3);
    assert_eq!(r["config"]["linear2d"]["step"], 0.05);
    for f in r["outputs"].as_array().unwrap() {
        assert!(dir.path().join(f.as_str().unwrap()).exists(), "{f}");
    }
    let utility = std::fs::read_to_string(dir.path().join("utility.csv")).unwrap();
    assert!(utility.starts_with("iter,utility,grad_norm,wall_time"));
    assert_eq!(utility.lines().count(), 5);
}

#[test]
fn report_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let o = oed(&["logistic", "--iters", "2", "--seed", "5", "--out", a.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = serde_json::to_string(&report(a.path())["config"]).unwrap();
    let b = tempfile::tempdir().unwrap();
    let path = b.path().join("config.json");
    std::fs::write(&path, cfg).unwrap();
    let o = oed(&["logistic", "--config", path.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["schedules.csv", "posterior.csv"] {
        assert_eq!(
            std::fs::read_to_string(a.path().join(f)).unwrap(),
            std::fs::read_to_string(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for (name, text) in [
        ("unknown.json", r#"{"version": 1, "logistic": {"gama": 0.1}}"#),
        ("version.json", r#"{"version": 7}"#),
        ("missing.json", r#"{"seed": 3}"#),
        ("value.json", r#"{"version": 1, "linear2d": {"sigma": -1}}"#),
    ] {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        let o = oed(&["linear2d", "--config", p.to_str().unwrap(), "--out", out]);
        assert_eq!(o.status.code(), Some(1), "{name}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("configuration"), "{name}");
    }
    assert!(!oed(&["linear2d", "--config", "/nonexistent/cfg.json"]).status.success());
}

#[test]
fn failed_check_sets_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    std::fs::write(
        &p,
        r#"{"version": 1, "gradcheck": {"lg_n_t": 60, "lg_tolerance": 1e-14,
            "nl_n_t": 6, "nl_n_x": 401, "nl_replicates": 2, "nl_tolerance": 1000}}"#,
    )
    .unwrap();
    let o = oed(&["gradcheck", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[FAIL]"));
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn default_config_round_trips() {
    let o = oed(&["default-config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["logistic"]["t_end"], 6.0);
}
