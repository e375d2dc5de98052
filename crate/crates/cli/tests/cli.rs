use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slp-smpc"))
        .arg("--out")
        .arg(out)
        .arg("--cache-dir")
        .arg(cache)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dirs() -> (tempfile::TempDir, tempfile::TempDir) {
    (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap())
}

#[test]
fn help_and_usage_errors() {
    let (out, cache) = dirs();
    assert_eq!(code(&run(out.path(), cache.path(), &["--help"])), 0);
    assert_eq!(code(&run(out.path(), cache.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(out.path(), cache.path(), &["simulate", "--method", "mpc"])), 1);
    assert_eq!(code(&run(out.path(), cache.path(), &["--scenario", "missing.toml", "design-k"])), 1);
    let o = run(out.path(), cache.path(), &["simulate", "--workers", "0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--workers"));
    assert_eq!(code(&run(out.path(), cache.path(), &["sweep-p", "--p", "0.4"])), 1);
    assert_eq!(code(&run(out.path(), cache.path(), &["design-k", "--use-k", "1,2"])), 1);
}

#[test]
fn design_k_verifies_fixed_gain() {
    let (out, cache) = dirs();
    let o = run(out.path(), cache.path(), &["design-k", "--use-k", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("gain.json")).unwrap())
            .unwrap();
    assert_eq!(doc["synthesized"], false);
    assert_eq!(doc["scenario"], "hvac");
    assert_eq!(doc["k"]["rows"], 1);
    assert_eq!(doc["k"]["data"], serde_json::json!([[0.0, 0.0, 0.0]]));
    assert!(doc["margins"][0].as_f64().unwrap() > 0.0);
}

#[test]
fn design_k_exit_codes() {
    let (out, cache) = dirs();
    assert_eq!(code(&run(out.path(), cache.path(), &["design-k", "--synthesize"])), 0);
    let o = run(out.path(), cache.path(), &["design-k", "--use-k", "2,2,2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn infeasible_scenario_exits_with_design_code() {
    let (out, cache) = dirs();
    let text = slp_smpc::scenarios::HVAC_TOML.replace("b = [0.5]", "b = [0.01]");
    assert_ne!(text, slp_smpc::scenarios::HVAC_TOML);
    let path = out.path().join("tight.toml");
    std::fs::write(&path, text).unwrap();
    let o = run(out.path(), cache.path(), &["--scenario", path.to_str().unwrap(), "terminal-set"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("margin"));
}

#[test]
fn terminal_set_cap_and_cache() {
    let (out, cache) = dirs();
    let o = run(out.path(), cache.path(), &["terminal-set", "--mu-max", "5"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let first = run(out.path(), cache.path(), &["terminal-set"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(stdout(&first).contains("nu = 52, mu = 56"));
    assert!(!stdout(&first).contains("from cache"));
    let second = run(out.path(), cache.path(), &["terminal-set"]);
    assert_eq!(code(&second), 0);
    assert!(stdout(&second).contains("terminal set loaded from cache"));
    let set: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.path().join("terminal_set.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(set["mu"], 56);
    assert_eq!(set["rows"].as_array().unwrap().len(), 57);
}

#[test]
fn empty_simulation_and_reports() {
    let (out, cache) = dirs();
    let o = run(out.path(), cache.path(), &["simulate", "--rollouts", "1", "--steps", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.path().join("rc").join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["min_satisfaction"], serde_json::Value::Null);
    assert_eq!(summary["satisfaction"], serde_json::json!([]));

    let report = run(out.path(), cache.path(), &["report"]);
    assert_eq!(code(&report), 0, "{}", stderr(&report));
    let md = std::fs::read_to_string(out.path().join("report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| rc")).count(), 1);

    for method in ["rc-mod", "policy17"] {
        let o = run(
            out.path(),
            cache.path(),
            &["simulate", "--method", method, "--rollouts", "2", "--steps", "3", "--seed", "4"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(code(&run(out.path(), cache.path(), &["report"])), 0);
    let md = std::fs::read_to_string(out.path().join("report.md")).unwrap();
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| method")).collect();
    assert_eq!(rows.len(), 3, "{md}");
    let csv = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.path().join("rc-mod").join("rollouts.csv").exists());
}

#[test]
fn report_needs_results() {
    let (out, cache) = dirs();
    let o = run(out.path(), cache.path(), &["report"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no summary.json"));
}

#[test]
fn campaigns_replay_identically() {
    let (out, cache) = dirs();
    let (a, b) = (out.path().join("a"), out.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let o = run(
            dir,
            cache.path(),
            &["simulate", "--rollouts", "4", "--steps", "3", "--workers", workers],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for file in ["summary.json", "rollouts.csv"] {
        let read = |d: &Path| std::fs::read_to_string(d.join("rc").join(file)).unwrap();
        assert_eq!(read(&a), read(&b), "{file}");
    }
}

#[test]
fn cache_dir_from_environment() {
    let (out, cache) = dirs();
    for _ in 0..2 {
        let o = Command::new(env!("CARGO_BIN_EXE_slp-smpc"))
            .env(slp_smpc::terminal::CACHE_DIR_ENV, cache.path())
            .arg("--out")
            .arg(out.path())
            .arg("terminal-set")
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
    }
    let entries = std::fs::read_dir(cache.path()).unwrap().count();
    assert_eq!(entries, 1);
}
