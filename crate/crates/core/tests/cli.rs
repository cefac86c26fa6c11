use std::fs;
use std::process::{Command, Output};

fn randop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randop"))
        .args(args)
        .env_remove("RANDOP_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn solve_exact_single_state() {
    let out = randop(&["solve-exact", "--model", "single"]);
    assert!(out.status.success());
    assert!(stdout(&out).lines().any(|l| l == "v* = 10"), "{}", stdout(&out));
}

#[test]
fn solve_exact_q_matches_v() {
    let out = randop(&["solve-exact", "--model", "chain2-two-action", "--kind", "discounted-q"]);
    assert!(out.status.success());
    let s = stdout(&out);
    assert!(s.contains("Q* = [0, 0.6, 1, 0.8]"), "{s}");
    assert!(s.contains("v* = [0, 0.8]"), "{s}");
}

#[test]
fn stationary_first_line() {
    let out = randop(&["stationary", "--p", "0.9", "--w", "2"]);
    assert!(out.status.success());
    let s = stdout(&out);
    let mut lines = s.lines();
    assert_eq!(lines.next(), Some("state, mass"));
    assert_eq!(lines.next(), Some("0, 0.765432098765"));
}

#[test]
fn bound_calc_valid_and_invalid() {
    let out = randop(&["bound-calc", "--p", "0.95", "--w", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("bound = 0.16635078"));

    let out = randop(&["bound-calc", "--p", "0.5", "--w", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(randop(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(randop(&["stationary", "--w", "2"]).status.code(), Some(1));
    assert_eq!(randop(&["solve-exact", "--model", "nope"]).status.code(), Some(1));
    assert_eq!(randop(&["--help"]).status.code(), Some(0));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_randop"))
        .args(["run-evi", "--model", "garnet3", "--n", "20", "--iterations", "5", "--replicas", "3"])
        .env("RANDOP_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(csv.starts_with("replica,k,error,gain_estimate"));
    assert_eq!(csv.lines().count(), 1 + 3 * 6);
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"model": "garnet3", "kind": "evi", "n": 500, "iterations": 20, "burn_in": 10,
            "replicas": 40, "kappa": 14.0, "epsilon": 2.0, "delta": 0.29, "master_seed": 9}"#,
    )
    .unwrap();
    let mut runs = vec![];
    for name in ["a", "b"] {
        let target = dir.path().join(name);
        let out = randop(&["experiment", "--config", config.to_str().unwrap(), "--output", target.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(fs::read(target.join("trajectories.csv")).unwrap());
        assert!(target.join("summary.json").exists());
        assert!(target.join("certificate.csv").exists());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn experiment_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"model": "chain2", "kind": "evi", "bogus": 1}"#).unwrap();
    let out = randop(&["experiment", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
