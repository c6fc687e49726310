use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn socnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socnav")).args(args).env_remove("SOCNAV_PORT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let o = socnav(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--scenario"));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(socnav(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(socnav(&["--help"]).status.code(), Some(0));
}

#[test]
fn headless_simulation_writes_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ep.jsonl");
    let scenario = fixture("scenarios/fig2.json");
    let script = fixture("scripts/fig2.json");
    let o = socnav(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("status: goal_reached\n"), "{}", stdout(&o));
    let text = std::fs::read_to_string(&log).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["schema"], "socnav-episode");
    assert!(text.contains("\"go_right\""));
}

#[test]
fn evaluation_prints_model_and_baseline_rows() {
    let data = fixture("data/heldout.ndjson");
    let lstm = fixture("models/lstm.json");
    let gat = fixture("models/gat.json");
    let o = socnav(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--lstm",
        lstm.to_str().unwrap(),
        "--gat",
        gat.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0], ["model", "ADE", "FDE", "RME"]);
    assert_eq!(rows[1][0], "gat");
    assert_eq!(rows[2][0], "constant_velocity");
    let ade = |r: &Vec<&str>| r[1].parse::<f64>().unwrap();
    assert!(ade(&rows[1]) < ade(&rows[2]));
    assert!(rows[3][0] == "people:" && rows[3][1].parse::<usize>().unwrap() > 0);
}

#[test]
fn gesture_fixtures_classify_by_name() {
    for class in ["wait", "go_left", "go_right", "continue"] {
        let path = fixture(&format!("gestures/{class}.json"));
        let o = socnav(&["classify-gesture", "--landmarks", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), class);
    }
}

#[test]
fn domain_errors_exit_one() {
    let o = socnav(&["simulate", "--scenario", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));
    let scenario = fixture("scenarios/fig1.json");
    let o = socnav(&["simulate", "--scenario", scenario.to_str().unwrap(), "--serve", "--speedup", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("speedup"));
}
