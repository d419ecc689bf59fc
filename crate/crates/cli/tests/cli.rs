use std::fs;
use std::io::BufReader;
use std::process::{Command, Output};

use actorflow::metrics::{read_jsonl, CSV_COLUMNS};

fn actorflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actorflow")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_one_csv_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let o = actorflow(&[
        "run", "--algo", "a2c", "--env", "chain", "--workers", "4", "--seed", "42", "--iters", "50", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 51);
    assert!(lines[0].starts_with(&CSV_COLUMNS.join(",")));
    assert!(text.ends_with('\n') && !text.contains('\r'));
    assert!(stdout(&o).starts_with("a2c: 50 iterations"));
}

#[test]
fn jsonl_lines_are_metrics_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let o = actorflow(&["run", "--algo", "dqn", "--iters", "6", "--format", "jsonl", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut expected: Vec<&str> = CSV_COLUMNS.to_vec();
        expected.push("extras");
        expected.sort_unstable();
        assert_eq!(keys, expected);
    }
    let records = read_jsonl(BufReader::new(fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(records.iter().map(|r| r.iter).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
}

#[test]
fn sync_runs_are_reproducible_apart_from_timing() {
    let run = || {
        let o = actorflow(&["run", "--algo", "a2c", "--seed", "7", "--iters", "20", "--format", "jsonl"]);
        assert!(o.status.success());
        read_jsonl(o.stdout.as_slice())
            .unwrap()
            .into_iter()
            .map(|mut r| {
                r.wall_time_s = 0.0;
                r.throughput_steps_per_s = 0.0;
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn bad_arguments_exit_with_two() {
    for args in [
        vec!["run", "--algo", "nope"],
        vec!["run"],
        vec!["run", "--algo", "a2c", "--env", "gridworld"],
        vec!["run", "--algo", "a2c", "--workers", "0"],
        vec!["run", "--algo", "a2c", "--format", "xml"],
        vec!["frobnicate"],
    ] {
        let o = actorflow(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"algo": "a2c", "iters": 3, "horizon": 5, "num_workers": 3}"#).unwrap();
    let o = actorflow(&["run", "--config", cfg.to_str().unwrap(), "--workers", "2", "--format", "jsonl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_jsonl(o.stdout.as_slice()).unwrap();
    assert_eq!(records.len(), 3);
    // 2 workers from the flag, horizon 5 from the file.
    assert_eq!(records[0].steps_sampled, 10);

    fs::write(&cfg, r#"{"algo": "a2c", "no_such_knob": 1}"#).unwrap();
    assert_eq!(actorflow(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(actorflow(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("m.csv");
    let o = actorflow(&["run", "--algo", "a2c", "--iters", "2", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_iterations_give_a_header_only_csv() {
    let o = actorflow(&["run", "--algo", "apex", "--iters", "0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), format!("{}\n", CSV_COLUMNS.join(",")));
}

#[test]
fn list_algos_names_every_plan() {
    let o = actorflow(&["list-algos"]);
    let text = stdout(&o);
    for name in ["a2c", "a3c", "dqn", "apex", "two_trainer", "maml_lite"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn sampling_bench_reports_cores_and_one_parameter() {
    let o = actorflow(&["bench-sampling", "--workers", "1,2", "--warmup-s", "0.05", "--measure-s", "0.1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# cores="));
    assert_eq!(lines.next().unwrap(), "workers,cores,policy_params,steps,seconds,steps_per_s,speedup");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), ("1", "2"));
    assert!(rows.iter().all(|r| r[2] == "1"));
    assert_eq!(actorflow(&["bench-sampling", "--workers", "0"]).status.code(), Some(2));
}

#[test]
fn compose_bench_reports_both_timings() {
    let o = actorflow(&["bench-compose", "--iters", "20", "--warmup", "2", "--repeats", "1", "--format", "jsonl"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for key in ["cores", "measured_pair_s", "predicted_pair_s", "ppo_s", "dqn_s", "rollout_s", "ratio"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}
