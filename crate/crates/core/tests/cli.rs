use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nasloop::RunLogRecord;

fn nasloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nasloop"))
        .args(args)
        .output()
        .expect("spawn nasloop")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: serde_json::Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn sim_config(dir: &Path, iterations: u64) -> String {
    write_config(
        dir,
        serde_json::json!({"backend": "sim", "max_iterations": iterations, "seed": 3}),
    )
}

fn read_records(path: &Path) -> Vec<RunLogRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn sim_run_writes_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 20);
    let log = dir.path().join("run.jsonl");
    let report = dir.path().join("report");
    let o = nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Iterations") && out.contains("Best acc."), "{out}");
    let last = out.lines().last().unwrap();
    let event: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(event["event"], "finished");
    assert_eq!(event["total_iterations"], 20);
    assert_eq!(read_records(&log).len(), 20);
    assert_eq!(stderr(&o).lines().filter(|l| l.contains("\"iteration\"")).count(), 20);
    assert!(report.join("summary.json").exists());
}

#[test]
fn identical_runs_produce_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 15);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for log in [&a, &b] {
        assert!(nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap()]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn zero_window_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({"window_size": 0, "max_iterations": 5}));
    let log = dir.path().join("x.jsonl");
    let o = nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("window_size"), "{}", stderr(&o));
    assert!(!log.exists());
}

#[test]
fn unknown_config_key_is_rejected_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({"max_iteration": 5}));
    let o = nasloop(&["run", "--config", &config, "--log", "/dev/null"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("max_iteration") && err.contains("config.json:2:"), "{err}");
}

#[test]
fn llm_backend_without_endpoints_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 5);
    let o = nasloop(&["--backend", "llm", "run", "--config", &config, "--log", dir.path().join("l.jsonl").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("generator"), "{}", stderr(&o));
}

#[test]
fn no_feedback_run_logs_no_improver_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        serde_json::json!({"max_iterations": 12, "ablation": "no_feedback"}),
    );
    let log = dir.path().join("nf.jsonl");
    assert!(nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap()]).status.success());
    let records = read_records(&log);
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.improver.is_none()));
    assert_eq!(records.last().unwrap().llm_calls, 12);
}

#[test]
fn existing_log_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 5);
    let log = dir.path().join("run.jsonl");
    fs::write(&log, "precious\n").unwrap();
    let o = nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(fs::read_to_string(&log).unwrap(), "precious\n");
    let o = nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap(), "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_records(&log).len(), 5);
}

#[test]
fn resume_completes_a_torn_log_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 25);
    let full = dir.path().join("full.jsonl");
    assert!(nasloop(&["run", "--config", &config, "--log", full.to_str().unwrap()]).status.success());
    let text = fs::read_to_string(&full).unwrap();

    let torn = dir.path().join("torn.jsonl");
    let lines: Vec<&str> = text.lines().collect();
    let partial = format!("{}\n{}", lines[..9].join("\n"), &lines[9][..lines[9].len() / 2]);
    fs::write(&torn, partial).unwrap();
    let o = nasloop(&["resume", "--config", &config, "--log", torn.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&torn).unwrap(), text);

    // A finished log resumes to itself.
    let o = nasloop(&["resume", "--config", &config, "--log", full.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&full).unwrap(), text);
}

#[test]
fn resume_of_missing_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 5);
    let o = nasloop(&["resume", "--config", &config, "--log", dir.path().join("nope.jsonl").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no such log"), "{}", stderr(&o));
}

#[test]
fn analyze_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path(), 30);
    let log = dir.path().join("run.jsonl");
    assert!(nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap()]).status.success());
    let out = dir.path().join("analysis");
    let o = nasloop(&["analyze", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap(), "--permutations", "500"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["summary.json", "trajectories.csv", "per_iteration.csv", "smoothed.csv", "best_so_far.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total_iterations"], 30);
    assert_eq!(fs::read_to_string(out.join("smoothed.csv")).unwrap().lines().count(), 31);
}

#[test]
fn analyze_of_all_failure_run_reports_no_successes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        serde_json::json!({"max_iterations": 10, "sim": {"failure_rate": 1.0}}),
    );
    let log = dir.path().join("fail.jsonl");
    let o = nasloop(&["run", "--config", &config, "--log", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("a");
    let o = nasloop(&["analyze", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("NoSuccesses"), "{}", stdout(&o));
}

#[test]
fn analyze_rejects_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    fs::write(&log, "").unwrap();
    let o = nasloop(&["analyze", "--log", log.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn simulate_single_seed_writes_variant_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({"max_iterations": 20}));
    let out = dir.path().join("sim");
    let o = nasloop(&["simulate", "--config", &config, "--seeds", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["none", "no_feedback", "no_reference"] {
        assert_eq!(read_records(&out.join(format!("seed4_{v}.jsonl"))).len(), 20);
    }
    assert!(out.join("comparison.json").exists());
    assert!(stdout(&o).contains("no_reference"));
}

#[test]
fn simulate_seed_range_prints_medians() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({"max_iterations": 30}));
    let o = nasloop(&["simulate", "--config", &config, "--seeds", "0..4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("median best"), "{out}");
    assert_eq!(out.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4);
}

#[test]
fn simulate_rejects_bad_seed_list() {
    assert!(!nasloop(&["simulate", "--seeds", "5..2"]).status.success());
    assert!(!nasloop(&["simulate", "--seeds", "a,b"]).status.success());
}

#[test]
fn shipped_configs_load() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in ["sim.json", "llm.json"] {
        let path = Path::new(dir).join(name);
        let config = nasloop::config::CliConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        config.templates().unwrap();
    }
}
