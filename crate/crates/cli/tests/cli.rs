use std::fs;
use std::process::{Command, Output};

fn kdv_mz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdv-mz"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&kdv_mz(&[])), 1);
    assert_eq!(code(&kdv_mz(&["frobnicate"])), 1);
    assert_eq!(code(&kdv_mz(&["fit", "--window", "3"])), 1);
    assert_eq!(code(&kdv_mz(&["compare", "--models", "rom9"])), 1);
    assert_eq!(code(&kdv_mz(&["--help"])), 0);
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = kdv_mz(&["solve-full", "--dt", "0", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt must be positive"));
}

#[test]
fn unwritable_output_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("sub");
    let o = kdv_mz(&[
        "solve-full",
        "--t-end",
        "0.01",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn raw_fourth_order_blow_up_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = kdv_mz(&[
        "run-rom", "--order", "4", "--raw", "--t-end", "1", "--out", out,
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blow-up"));
}

#[test]
fn missing_coefficients_name_the_fit_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = kdv_mz(&["compare", "--t-end", "1", "--out", out]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("kdv-mz fit --epsilon 0.1 --n-resolved 20"),
        "{err}"
    );
}

#[test]
fn derive_writes_polynomials() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = kdv_mz(&["derive", "--order", "2", "--out", out]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("-1/2 t^2 [PL PL QL - PL QL QL]"),
        "{stdout}"
    );
    assert!(dir.path().join("memory_order2.json").exists());
    assert!(!dir.path().join("operator_order3.txt").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "t_end = 50.0\nsnapshot_interval = 0.5\nn_grid = [16]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = kdv_mz(&[
        "solve-full",
        "--config",
        cfg.to_str().unwrap(),
        "--t-end",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("solve_full_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["runs"][0]["snapshots"], 3);
    assert_eq!(report["runs"][0]["steps"], 1000);
    assert!(report["runs"][0]["max_resolved_departure"]["16"].is_number());
}

#[test]
fn fit_then_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let fit = kdv_mz(&["fit", "--window", "0,1", "--out", out]);
    assert_eq!(code(&fit), 0, "{}", String::from_utf8_lossy(&fit.stderr));
    let cmp = kdv_mz(&[
        "compare",
        "--window",
        "0,1",
        "--t-end",
        "1",
        "--models",
        "markov,rom2,rom4",
        "--out",
        out,
    ]);
    assert_eq!(code(&cmp), 0, "{}", String::from_utf8_lossy(&cmp.stderr));
    let errors = fs::read_to_string(dir.path().join("compare_errors_eps0.1.csv")).unwrap();
    assert!(errors.starts_with("# config_hash: "));
}
