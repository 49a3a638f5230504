use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ddro(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddro")).args(args).current_dir(cwd).output().expect("binary runs")
}

const ID: &str = "identity-2-c1-m2-t1-b0.5";

#[test]
fn generate_validate_solve_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("filter.json"), format!(r#"{{"ids": ["{ID}"]}}"#)).unwrap();
    let out = ddro(&["gen-instances", "--filter", "filter.json"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inst = root.join("out/instances").join(format!("{ID}.json"));
    assert!(inst.exists());

    let out = ddro(&["validate", inst.to_str().unwrap()], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = ddro(&["lower-level", inst.to_str().unwrap(), "--kappa", "0.5", "--eta", "0.5", "--risk", "cvar:0.2"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("value"));

    fs::write(root.join("sweep.json"), format!(r#"{{"filter": {{"ids": ["{ID}"]}}, "ks": [1.0, 2.0]}}"#)).unwrap();
    let out = ddro(&["scale-sweep", "--config", "sweep.json"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(root.join("out/scale_sweep.csv")).unwrap();
    assert!(csv.starts_with("instance_id,budget_ratio,kappa,eta,k,V0,Vbar,C_mech,C_tldr,wcr,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("filter.json"), r#"{"ids": ["no-such-instance"]}"#).unwrap();
    let out = ddro(&["gen-instances", "--filter", "filter.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = ddro(&["lower-level", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unsupported_risk_in_robustness_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rob.json"), r#"{"risk": {"kind": "var", "beta": 0.1}}"#).unwrap();
    let out = ddro(&["robustness", "--config", "rob.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
}
