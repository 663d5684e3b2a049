use std::path::Path;
use std::process::{Command, Output};

fn chiralab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chiralab")).args(args).current_dir(dir).output().expect("binary runs")
}

const RIV: &str = r#"
regime = "R_iv"
n_values = [0, 1]
delta.d0 = 0.01
delta.r = 0.5
lambda.c = 1.58
lambda.s = 1.0
mu.m0 = 1.0
mu.t = 1.5
pen.axes = [[0.0, 0.0, 1.0]]
pins.left = [0.0, 0.0, 1.0]
pins.right = [0.0, 0.0, -1.0]
"#;

#[test]
fn sweep_writes_schema_and_reports_convergence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("riv.toml"), RIV).unwrap();
    let o = chiralab(&["sweep", "--config", "riv.toml", "--out", "rows.csv", "--threads", "2", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "run_id,regime,n,lambda,delta,mu,p_n,beta_n,energy,energy_scaled,well_term,gradient_term,penalty_term,y_variation,iterations,converged,grad_norm,seed,wall_ms"
    );
    assert_eq!(csv.lines().count(), 3);

    std::fs::write(dir.path().join("short.toml"), format!("{RIV}solver.max_iters = 1\n")).unwrap();
    let o = chiralab(&["sweep", "--config", "short.toml", "--out", "short.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(dir.path().join("short.csv").exists());
}

#[test]
fn config_errors_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    // p_n beta_n stays bounded, so these rules are not R_iv
    let bad = RIV.replace("mu.t = 1.5", "mu.t = 2.0");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let o = chiralab(&["sweep", "--config", "bad.toml", "--out", "rows.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("regime"));
    assert!(!dir.path().join("rows.csv").exists());
    std::fs::write(dir.path().join("typo.toml"), format!("{RIV}lamda.c = 1.0\n")).unwrap();
    let o = chiralab(&["sweep", "--config", "typo.toml", "--out", "rows.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("rows.csv").exists());
}

#[test]
fn emit_energy_and_minimize() {
    let dir = tempfile::tempdir().unwrap();
    let o = chiralab(&["emit", "tanh-profile", "--out", "tanh.txt"], dir.path());
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("tanh.txt")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split_whitespace().count() == 7));
    let p = chiralab::io::parse_profile(&text).unwrap();
    assert_eq!(chiralab::io::write_profile(&p), text);

    assert!(chiralab(&["emit", "tanh-chain", "--out", "chain.txt"], dir.path()).status.success());
    let job = "chain = \"chain.txt\"\nlambda = 0.0015811388300841897\ndelta = 0.001\nmode = \"hard\"\npen.axes = [[0.0, 0.0, 1.0]]\npins.left = [0.0, 0.0, 1.0]\npins.right = [0.0, 0.0, -1.0]\n";
    std::fs::write(dir.path().join("job.toml"), job).unwrap();
    let o = chiralab(&["energy", "--config", "job.toml"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    let scaled: f64 = out.lines().find_map(|l| l.strip_prefix("mode_energy_scaled=")).unwrap().parse().unwrap();
    assert!((scaled - 8.0 / 3.0).abs() < 0.05 * 8.0 / 3.0, "{scaled}");
    let o = chiralab(&["minimize", "--config", "job.toml", "--out", "min.txt"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(chiralab::io::parse_chain(&std::fs::read_to_string(dir.path().join("min.txt")).unwrap()).is_ok());

    std::fs::write(dir.path().join("chain.txt"), "1 0 0\n0 1 0\n0 0 oops\n").unwrap();
    let o = chiralab(&["energy", "--config", "job.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn accept_filter_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = chiralab(&["accept", "--only", "9"], dir.path());
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(out.lines().count(), 1);
    assert!(out.contains("criterion 9 [PASS]"));
    let o = Command::new(env!("CARGO_BIN_EXE_chiralab"))
        .args(["accept", "--only", "9"])
        .env("CHIRALAB_TOL_OVERRIDE", "9=1e-6")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("criterion 9 [FAIL]"));
}
