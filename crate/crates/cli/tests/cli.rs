use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/pinch")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dexlink")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Copies the fixture session into a scratch directory.
fn scratch_session() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for e in fs::read_dir(fixture()).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), dir.path().join(e.file_name())).unwrap();
    }
    dir
}

#[test]
fn fk_at_zero_travel_is_zero_pose() {
    let o = run(&["--format", "json-lines", "fk", "--digit", "all", "--d", &["0,0,0"; 5].join(",")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = json_lines(&o);
    assert_eq!(rows.len(), 5);
    for r in rows {
        for k in ["q1_rad", "q2_rad", "q3_rad", "q4_rad"] {
            assert!(r[k].as_f64().unwrap().abs() < 1e-9, "{r}");
        }
    }
}

#[test]
fn ik_then_fk_round_trips() {
    for digit in ["thumb", "index", "pinky"] {
        let ik = run(&["--format", "json-lines", "ik", "--digit", digit, "--q", "0.1,0.6,0.8"]);
        assert!(ik.status.success(), "{}", stderr(&ik));
        let r = &json_lines(&ik)[0];
        let d: Vec<String> = ["d1_m", "d2_m", "d3_m"].iter().map(|k| format!("{:?}", r[*k].as_f64().unwrap())).collect();
        let fk = run(&["--format", "json-lines", "fk", "--digit", digit, "--d", &d.join(",")]);
        assert!(fk.status.success(), "{}", stderr(&fk));
        let q = &json_lines(&fk)[0];
        for (k, want) in [("q1_rad", 0.1), ("q2_rad", 0.6), ("q3_rad", 0.8)] {
            assert!((q[k].as_f64().unwrap() - want).abs() < 1e-8, "{digit} {k}: {q}");
        }
    }
}

#[test]
fn csv_output_has_header_and_rows() {
    let o = run(&["ik", "--digit", "all", "--q", &["0,0.3,0.3"; 5].join(",")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("digit,d1_m,d2_m,d3_m"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn out_of_travel_names_the_actuator() {
    let o = run(&["fk", "--d", "0.5,0,0"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("d1"), "{}", stderr(&o));
}

#[test]
fn missing_session_exits_2() {
    let o = run(&["replay", "/nonexistent/session.toml", "--out", "/tmp/never.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_session_exits_3() {
    let dir = scratch_session();
    let path = dir.path().join("session.toml");
    let text = fs::read_to_string(&path).unwrap().replace("hand_rate_hz = 100.0", "hand_rate_hz = -5.0");
    fs::write(&path, text).unwrap();
    let o = run(&["--config", dir.path().to_str().unwrap(), "replay", "session.toml", "--out", "log.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["fk", "--bogus"]).status.code(), Some(64));
    assert_eq!(run(&["fk", "--digit", "toe", "--d", "0,0,0"]).status.code(), Some(64));
    assert_eq!(run(&["fk", "--d", "0,0"]).status.code(), Some(64));
}

#[test]
fn help_and_version_exit_0() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("replay"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn validate_geometry_reports_closed_loops() {
    let o = run(&["--format", "json-lines", "--config", fixture().to_str().unwrap(), "validate-geometry", "--hand", "hand.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = json_lines(&o);
    assert_eq!(rows.len(), 5);
    for r in rows {
        for k in ["mcp_1", "mcp_2", "psu", "pip_fourbar", "dip"] {
            assert!(r[k].as_f64().unwrap().abs() < 1e-9, "{r}");
        }
    }
}

#[test]
fn replay_matches_golden_and_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture();
    let mut logs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("log{threads}.csv"));
        let lat = dir.path().join(format!("lat{threads}.csv"));
        let o = run(&[
            "--config",
            root.to_str().unwrap(),
            "replay",
            "session.toml",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
            "--latency-out",
            lat.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("tick"));
        assert!(fs::read_to_string(&lat).unwrap().starts_with("# dexlink-latency-log v1"));
        logs.push(fs::read(out).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0], fs::read(root.join("expected_commands.csv")).unwrap());
}

#[test]
fn distances_have_one_row_per_tick() {
    let root = fixture();
    let o = run(&[
        "--config",
        root.to_str().unwrap(),
        "distances",
        "--log",
        "expected_commands.csv",
        "--glove",
        "glove.jsonl",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t_s,human_thumb-index_m,robot_thumb-index_m,human_thumb-middle_m,robot_thumb-middle_m"
    );
    let ticks = fs::read_to_string(root.join("expected_commands.csv")).unwrap().lines().count() - 2;
    assert_eq!(lines.count(), ticks);
}

#[test]
fn distances_reject_unknown_pair() {
    let root = fixture();
    let o = run(&["--config", root.to_str().unwrap(), "distances", "--glove", "glove.jsonl", "--pairs", "thumb-elbow"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("thumb-elbow"));
    assert_eq!(run(&["distances"]).status.code(), Some(64));
}

#[test]
fn bench_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.json");
    let o = run(&["bench", "--iterations", "50", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["iterations"], 50);
    assert_eq!(v["failures"], 0);
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 7);
    for e in entries {
        for k in ["samples", "median_us", "p99_us", "max_us"] {
            assert!(e[k].is_number(), "{e}");
        }
    }
}

#[test]
fn synth_writes_a_replayable_session() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&["synth", "--out-dir", d, "--duration", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["hand.toml", "retarget.toml", "arm.toml", "glove.jsonl", "wrist.jsonl", "session.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let o = run(&["--config", d, "replay", "session.toml", "--out", "log.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap().lines().count(), 2 + 51);
}
