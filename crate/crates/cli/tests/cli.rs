use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outerprod")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn check<'a>(r: &'a Value, name: &str) -> &'a Value {
    r["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap()
}

#[test]
fn verify_grad_on_default_tanh_net() {
    let out = bin(&["verify-grad"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    let c = check(&r, "grad/fd");
    assert_eq!(c["status"], "pass");
    assert!(c["max_rel_err"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["config"]["net"]["activation"], "tanh");
    assert!(c["runtime_ms"].is_null());
}

#[test]
fn empty_check_list_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "schema_version = 1\nchecks = []\n");
    let out = bin(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checks"));
    assert!(out.stdout.is_empty());
}

#[test]
fn malformed_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("unknown.toml", "schema_version = 1\nchecks = [\"grad\"]\nextra = 3\n"),
        ("suite.toml", "schema_version = 1\nchecks = [\"nope\"]\n"),
        ("schema.toml", "schema_version = 9\nchecks = [\"grad\"]\n"),
        ("syntax.json", "{ not json"),
        ("dims.toml", "schema_version = 1\nchecks = [\"grad\"]\n[net]\ndims = [3]\n"),
    ] {
        let cfg = write(dir.path(), name, text);
        assert_eq!(bin(&["run", "--config", &cfg]).status.code(), Some(2), "{name}");
    }
    assert_eq!(bin(&["run", "--config", "/nonexistent/x.toml"]).status.code(), Some(2));
}

#[test]
fn failing_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // A huge FD step breaks the oracle, not the analytic code.
    let cfg = write(dir.path(), "c.toml", "schema_version = 1\nchecks = [\"grad\"]\nbatch = 2\n[fd]\nstep = 0.5\n");
    let out = bin(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(check(&report(&out), "grad/fd")["status"], "fail");
}

#[test]
fn internal_error_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "schema_version = 1\nchecks = [\"hess\"]\ndense_cap = 3\nbatch = 1\n");
    let out = bin(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cap"));
}

#[test]
fn json_config_seed_override_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "seed": 3, "batch": 2, "checks": ["conv", "bound"],
            "net": {"dims": [3, 4, 3], "classes": 4, "activation": "softplus"}}"#,
    );
    let out_path = dir.path().join("r.json");
    let out = bin(&["run", "--config", &cfg, "--seed", "11", "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(r["config"]["seed"], 11);
    assert_eq!(r["schema_version"], 1);
    let suites: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["suite"].as_str().unwrap()).collect();
    assert_eq!(suites.first(), Some(&"conv"));
    assert_eq!(suites.last(), Some(&"bound"));
}

#[test]
fn repeatable_suite_flag_replaces_checks() {
    let out = bin(&["run", "--suite", "storage", "--suite", "rank"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["config"]["checks"], serde_json::json!(["storage", "rank"]));
}

#[test]
fn storage_report_counts() {
    let out = bin(&["storage-report"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    let c = check(&r, "storage/configured_net");
    assert_eq!(c["counters"]["d2f_dp2_entries"], 9.0);
    assert_eq!(c["counters"]["eta_top_size_1"], 30.0);
    assert_eq!(c["counters"]["peak_streamed_eta"], 1.0);
    assert_eq!(c["counters"]["dense_hessian_entries"], (15.0f64 + 24.0 + 30.0).powi(2));
    assert_eq!(check(&r, "storage/interior_eta_n10")["status"], "pass");
}

#[test]
fn parallel_matches_sequential_and_timings_opt_in() {
    let a = bin(&["run", "--suite", "hess", "--suite", "rnn"]);
    let b = bin(&["run", "--suite", "hess", "--suite", "rnn", "--parallel"]);
    assert_eq!(a.stdout, b.stdout);
    let t = report(&bin(&["verify-hess", "--timings"]));
    assert!(t["checks"][0]["runtime_ms"].as_f64().is_some());
}
