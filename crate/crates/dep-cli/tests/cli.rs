//! End-to-end checks of the `dep` binary: exit codes, the effective-config
//! echo, output files, and bit-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

use dep::bench::{canonical_json, load_runs, load_suite};
use dep::config::ConfigMap;
use dep::engine::read_traces;

fn dep_cmd() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dep"));
    cmd.env_remove("DEP_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    dep_cmd().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> String {
    tmp.path().join(name).to_str().expect("utf-8 path").to_owned()
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_and_unknown_settings_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "a");

    let out = run(&["run-bench", "--out", &dir, "--set", "m=0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("config"), "stderr: {}", stderr(&out));

    let out = run(&["run-bench", "--out", &dir, "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn missing_suite_file_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "a");
    let missing = tmp.path().join("nope.json");
    let out = run(&[
        "run-bench",
        "--out",
        &dir,
        "--suite",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gen_suite_then_bench_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = out_dir(&tmp, "gen");
    let out = run(&["gen-suite", "--out", &gen, "--set", "items=16"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let suite_path = Path::new(&gen).join("suite.json");
    let suite = load_suite(&suite_path).expect("suite parses");
    assert_eq!(suite.items.len(), 16);

    let echoed = std::fs::read_to_string(Path::new(&gen).join("effective.cfg")).unwrap();
    let map = ConfigMap::parse(&echoed).expect("echo reparses");
    assert_eq!(map.get("items"), Some("16"));
    assert_eq!(map.get("seed"), Some("0"));

    let bench = out_dir(&tmp, "bench");
    let out = run(&[
        "run-bench",
        "--out",
        &bench,
        "--suite",
        suite_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let records = load_runs(&Path::new(&bench).join("runs.jsonl")).unwrap();
    let labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["origin", "dep_full"]);
    assert!(records[1].metrics.f1 >= records[0].metrics.f1);
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = out_dir(&tmp, "a");
    let b = out_dir(&tmp, "b");
    for dir in [&a, &b] {
        let out = run(&["run-bench", "--out", dir, "--set", "items=16", "--quiet"]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }
    let runs_a = load_runs(&Path::new(&a).join("runs.jsonl")).unwrap();
    let runs_b = load_runs(&Path::new(&b).join("runs.jsonl")).unwrap();
    assert_eq!(runs_a.len(), runs_b.len());
    for (ra, rb) in runs_a.iter().zip(&runs_b) {
        assert_eq!(
            canonical_json(ra).unwrap(),
            canonical_json(rb).unwrap(),
            "records for {} diverged",
            ra.label
        );
    }
}

#[test]
fn seed_precedence_env_then_file_then_set() {
    let tmp = tempfile::tempdir().unwrap();

    let dir = out_dir(&tmp, "env");
    let out = dep_cmd()
        .env("DEP_SEED", "77")
        .args(["gen-suite", "--out", &dir, "--set", "items=4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let echoed = std::fs::read_to_string(Path::new(&dir).join("effective.cfg")).unwrap();
    assert!(echoed.contains("seed = 77"), "echo: {echoed}");

    let dir = out_dir(&tmp, "set");
    let out = dep_cmd()
        .env("DEP_SEED", "77")
        .args(["gen-suite", "--out", &dir, "--set", "items=4", "--set", "seed=5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let echoed = std::fs::read_to_string(Path::new(&dir).join("effective.cfg")).unwrap();
    assert!(echoed.contains("seed = 5"), "echo: {echoed}");

    let out = dep_cmd()
        .env("DEP_SEED", "not-a-seed")
        .args(["gen-suite", "--out", &out_dir(&tmp, "bad")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_feeds_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "items = 8\nm = 2\n# comment\n").unwrap();
    let dir = out_dir(&tmp, "cfg");
    let out = run(&[
        "gen-suite",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        &dir,
        "--set",
        "m=4",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let echoed = std::fs::read_to_string(Path::new(&dir).join("effective.cfg")).unwrap();
    let map = ConfigMap::parse(&echoed).unwrap();
    assert_eq!(map.get("items"), Some("8"));
    assert_eq!(map.get("m"), Some("4"));
}

#[test]
fn sweep_writes_csv_chart_and_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "sweep");
    let out = run(&[
        "sweep",
        "--out",
        &dir,
        "--axis",
        "m",
        "--values",
        "1,2",
        "--repeats",
        "2",
        "--set",
        "items=8",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let csv = std::fs::read_to_string(Path::new(&dir).join("sweep_m.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("value,repeat,accuracy,precision,recall,f1,yes_rate,mean_forwards_per_step,wall_ms")
    );
    assert_eq!(lines.count(), 4);

    let chart = std::fs::read_to_string(Path::new(&dir).join("sweep_m.svg")).unwrap();
    assert!(chart.starts_with("<svg"));

    let records = load_runs(&Path::new(&dir).join("sweep_m.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
}

#[test]
fn ablate_writes_all_four_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "abl");
    let out = run(&["ablate", "--out", &dir, "--set", "items=8"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let records = load_runs(&Path::new(&dir).join("ablation.jsonl")).unwrap();
    let labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["origin", "dep_no_pc", "dep_no_ve", "dep_full"]);
}

#[test]
fn inspect_step_dumps_one_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "step");
    let out = run(&[
        "inspect-step",
        "--out",
        &dir,
        "--world-seed",
        "7",
        "--prompt",
        "is there a red cup",
        "--step",
        "0",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("N_eff"), "stdout: {stdout}");

    let traces = read_traces(&Path::new(&dir).join("step_trace.jsonl")).unwrap();
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0].step, 0);

    let out = run(&[
        "inspect-step",
        "--out",
        &dir,
        "--world-seed",
        "7",
        "--prompt",
        "is there a zorp",
        "--step",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(3), "ill-formed prompt is a config error");
}

#[test]
fn quiet_silences_stdout() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "q");
    let out = run(&["run-bench", "--out", &dir, "--set", "items=8", "--quiet"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(out.stdout.is_empty());
}
