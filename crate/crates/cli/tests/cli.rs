use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn demian(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demian"))
        .args(args)
        .env_remove("RUST_LOG")
        .env_remove("DEMIAN_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sorted_lines(path: &Path) -> Vec<String> {
    let mut lines: Vec<String> = fs::read_to_string(path).unwrap().lines().map(str::to_string).collect();
    lines.sort();
    lines
}

#[test]
fn cost_prints_flops_and_dollars() {
    let o = demian(&["cost", "--clips", "1000000", "--aspects", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("5.0e19"), "{out}");
    assert!(out.contains("$1144.00"), "{out}");

    let o = demian(&["cost", "--clips", "1000000", "--aspects", "4", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["corpus_flops"].as_f64().unwrap() / 2.004e20 - 1.0).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let o = demian(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(demian(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(demian(&["cost"]).status.code(), Some(1));
    for sub in ["annotate", "sft-gen", "simulate", "composite", "cost", "aggregate"] {
        let o = demian(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn zero_latency_async_injects_at_step_1() {
    let o = demian(&[
        "simulate",
        "--mode",
        "async",
        "--latency",
        "constant:0",
        "--chunk",
        "8",
        "--dt",
        "0.085",
        "--steps",
        "400",
        "--episodes",
        "10",
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["summary"]["mean_injected_step"], 1.0);
    assert_eq!(v["summary"]["median_injected_step"], 1.0);
    assert_eq!(v["summary"]["traces"], 10);
}

#[test]
fn invalid_values_exit_1() {
    let o = demian(&["simulate", "--chunk", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(demian(&["simulate", "--latency", "uniform:1"]).status.code(), Some(1));
    assert_eq!(demian(&["composite", "--threshold", "1.0"]).status.code(), Some(1));
    assert_eq!(
        demian(&["cost", "--clips", "1", "--params", "0"]).status.code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[rollout]\nhorizon = 8\n").unwrap();
    let o = demian(&["--config", cfg.to_str().unwrap(), "cost", "--clips", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));
}

#[test]
fn logs_are_json_lines_on_stderr() {
    let o = demian(&["simulate", "--chunk", "0"]);
    let line = stderr(&o).lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["level"], "ERROR");
    assert_eq!(v["subcommand"], "simulate");
    assert!(v["timestamp"].is_string());
    assert!(v["message"].as_str().unwrap().contains("chunk_horizon"));
    assert!(stdout(&o).is_empty());
}

#[test]
fn unwritable_sink_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let out = blocker.join("a.jsonl");
    let o = demian(&[
        "annotate",
        "--corpus",
        data("robocasa365.jsonl").to_str().unwrap(),
        "--dataset",
        "robocasa365",
        "--mock",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn annotate_then_sft_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut sinks = Vec::new();
    let mut datasets = Vec::new();
    for run in 0..2 {
        let sink = dir.path().join(format!("run{run}.jsonl"));
        let workers = if run == 0 { "1" } else { "4" };
        let o = demian(&[
            "--seed",
            "11",
            "--workers",
            workers,
            "annotate",
            "--corpus",
            data("robocasa365.jsonl").to_str().unwrap(),
            "--dataset",
            "robocasa365",
            "--aspects",
            "all",
            "--mock",
            "--out",
            sink.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(report["completed"], 32);
        sinks.push(sorted_lines(&sink));

        let o = demian(&[
            "--seed",
            "11",
            "sft-gen",
            "--reward-table",
            data("reward_table.json").to_str().unwrap(),
            "--annotations",
            sink.to_str().unwrap(),
            "--episodes",
            data("sft_episodes.jsonl").to_str().unwrap(),
            "--n",
            "60",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        datasets.push(stdout(&o));
    }
    assert_eq!(sinks[0], sinks[1]);
    assert_eq!(datasets[0], datasets[1]);
    assert_eq!(datasets[0].lines().count(), 60);
    // TurnOnSinkFaucet underperforms its baseline on every aspect
    for line in datasets[0].lines().filter(|l| l.contains("TurnOnSinkFaucet")) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["target_caption"], "");
        assert!(v["target_aspect"].is_null());
    }

    // a complete batch is a no-op on rerun
    let sink = dir.path().join("run0.jsonl");
    let o = demian(&[
        "--seed",
        "11",
        "annotate",
        "--corpus",
        data("robocasa365.jsonl").to_str().unwrap(),
        "--dataset",
        "robocasa365",
        "--mock",
        "--out",
        sink.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(
        (report["completed"].as_u64(), report["skipped"].as_u64()),
        (Some(0), Some(32))
    );
}

#[test]
fn composite_default_suite_matches_targets() {
    let o = demian(&["composite", "--mode", "fix,dynamic-gt", "--episodes", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("fix,5,0.5000,0.2800,0.1300"), "{out}");
    assert!(out.contains("dynamic-gt,5,0.6500,0.3100,0.2200"), "{out}");
    assert_eq!(
        out,
        stdout(&demian(&["composite", "--mode", "fix,dynamic-gt", "--episodes", "20"]))
    );
}

#[test]
fn composite_suite_file_records_swaps() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.jsonl");
    let o = demian(&[
        "composite",
        "--suite",
        data("composite_suite.json").to_str().unwrap(),
        "--mode",
        "dynamic-gt",
        "--episodes",
        "1",
        "--results",
        results.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&results).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let steps: Vec<u64> = v["prompt_history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [1, 105, 257]);
    assert_eq!(v["full_success"], true);
}

#[test]
fn aggregate_reproduces_family_summary() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/molmospaces_detail_vla.csv");
    let o = demian(&[
        "aggregate",
        "--matrix",
        golden.to_str().unwrap(),
        "--columns",
        "Pick Std,Pick Hard,Pick OOD,P+P Std,P+P Hard,P+P OOD,NextTo ID,NextTo OOD,Color",
        "--families",
        data("molmospaces_families.json").to_str().unwrap(),
        "--display",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("condition,Pick,P+P,NextTo,Color,Avg"), "{out}");
    assert!(out.contains("baseline,.48,.64,.25,.41,.44"), "{out}");
}

#[test]
fn config_file_supplies_paths_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("ann.jsonl");
    let cfg = dir.path().join("demian.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 5\n[paths]\ncorpus = {:?}\nannotations = {:?}\n",
            data("robocasa365.jsonl"),
            sink
        ),
    )
    .unwrap();
    let o = demian(&[
        "--config",
        cfg.to_str().unwrap(),
        "annotate",
        "--dataset",
        "robocasa365",
        "--mock",
        "--aspects",
        "arm_pose",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&sink).unwrap().lines().count(), 8);

    let a = stdout(&demian(&[
        "--config",
        cfg.to_str().unwrap(),
        "simulate",
        "--episodes",
        "5",
    ]));
    let b = stdout(&demian(&[
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "6",
        "simulate",
        "--episodes",
        "5",
    ]));
    assert!(a.contains(r#""seed":5"#) && b.contains(r#""seed":6"#), "{a}\n{b}");
}

#[test]
fn trace_lines_carry_the_episode_index() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("events.jsonl");
    let o = demian(&["simulate", "--episodes", "3", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let episodes: Vec<u64> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["episode"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(episodes.first(), Some(&0));
    assert_eq!(episodes.last(), Some(&2));
    assert!(episodes.windows(2).all(|w| w[0] <= w[1]));
}
