use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acopf::evaluation::{feasibility_rate, MetricsReport};
use serde_json::Value;

fn case(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)
}

fn acopf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acopf"))
        .args(args)
        .env_remove("ACOPF_LOG")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pf_prints_a_converged_solution() {
    let c = case("case30.m");
    let fdpf = stdout_json(&acopf(&["pf", "--case", s(&c), "--solver", "fdpf"]));
    let nr = stdout_json(&acopf(&["pf", "--case", s(&c)]));
    assert_eq!(fdpf["converged"], true);
    assert_eq!(fdpf["solver"], "fdpf");
    assert!(fdpf["residual_norm"].as_f64().unwrap() < 1e-5);
    let (a, b) = (fdpf["buses"].as_array().unwrap(), nr["buses"].as_array().unwrap());
    assert_eq!(a.len(), 30);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x["id"], y["id"]);
        for key in ["v", "theta"] {
            assert!((x[key].as_f64().unwrap() - y[key].as_f64().unwrap()).abs() < 1e-4);
        }
    }
}

#[test]
fn missing_case_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = acopf(&["train", "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "BadFlag");
    assert!(err["message"].as_str().unwrap().contains("--case"));
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let out = acopf(&["solve-everything"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "UnknownSubcommand");

    let out = acopf(&["pf", "--case", s(&case("case9.m")), "--solver", "gauss"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "BadFlag");
}

#[test]
fn runtime_failures_exit_1() {
    let out = acopf(&["pf", "--case", "no/such/case.m"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "Runtime");

    // one iteration cannot reach the tolerance from a flat start
    let out = acopf(&["pf", "--case", s(&case("case30.m")), "--max-iter", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "case = \"x.m\"\nepochz = 3\n").unwrap();
    let out = acopf(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let c = case("case30.m");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run).join("data.csv");
        let meta = stdout_json(&acopf(&[
            "gen-data", "--case", s(&c), "--samples", "5000", "--seed", "7", "--out", s(&out),
        ]));
        assert_eq!(meta["samples"], 5000);
        let side: Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
        let len = |k: &str| side[k]["end"].as_u64().unwrap() - side[k]["start"].as_u64().unwrap();
        assert_eq!((len("train"), len("val"), len("test")), (4167, 417, 416));
        assert_eq!(side["seed"], 7);
        files.push((std::fs::read(&out).unwrap(), std::fs::read(out.with_extension("json")).unwrap()));
    }
    assert!(files[0] == files[1]);
    let text = String::from_utf8(files[0].0.clone()).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 60);
    assert_eq!((header[0], header[29], header[30]), ("pd_1", "pd_30", "qd_1"));
    assert_eq!(text.lines().count(), 5001);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("one").join("model.json");
    let c = case("case9.m");
    let args = [
        "train", "--case", s(&c), "--samples", "48", "--epochs", "4", "--batch", "8", "--seed", "11",
        "--loss", "dc3", "--lambda", "2",
    ];
    let log1 = dir.path().join("one").join("log.jsonl");
    let mut a: Vec<&str> = args.to_vec();
    a.extend(["--out", s(&first), "--log", s(&log1)]);
    let r1 = stdout_json(&acopf(&a));

    let echo = first.with_extension("config.toml");
    let text = std::fs::read_to_string(&echo).unwrap();
    assert!(text.contains("loss = \"dc3\"") && text.contains("seed = 11"), "{text}");

    let second = dir.path().join("two").join("model.json");
    let log2 = dir.path().join("two").join("log.jsonl");
    std::fs::create_dir_all(second.parent().unwrap()).unwrap();
    let r2 = stdout_json(&acopf(&["train", "--config", s(&echo), "--out", s(&second), "--log", s(&log2)]));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(std::fs::read(&log1).unwrap(), std::fs::read(&log2).unwrap());
    assert_eq!(r1["test"]["mean_cost"], r2["test"]["mean_cost"]);
    assert_eq!(std::fs::read_to_string(&log1).unwrap().lines().count(), 4);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!("case = {:?}\nsamples = 24\n[train]\nepochs = 50\nseed = 1\n", s(&case("case9.m"))),
    )
    .unwrap();
    let out = dir.path().join("m.json");
    let r = stdout_json(&acopf(&["train", "--config", s(&cfg), "--epochs", "2", "--out", s(&out)]));
    assert_eq!(r["epochs"], 2);
    let echo = std::fs::read_to_string(out.with_extension("config.toml")).unwrap();
    assert!(echo.contains("epochs = 2") && echo.contains("samples = 24"));
}

#[test]
fn eval_matches_training_and_reports_merge() {
    let dir = tempfile::tempdir().unwrap();
    let c = case("case9.m");
    let data = dir.path().join("data.csv");
    stdout_json(&acopf(&["gen-data", "--case", s(&c), "--samples", "60", "--seed", "4", "--out", s(&data)]));
    let model = dir.path().join("model.json");
    let trained = stdout_json(&acopf(&[
        "train", "--case", s(&c), "--data", s(&data), "--epochs", "3", "--seed", "4", "--out", s(&model),
    ]));

    let report_path = dir.path().join("nr.json");
    let csv_path = dir.path().join("nr.csv");
    let printed = stdout_json(&acopf(&[
        "eval", "--checkpoint", s(&model), "--case", s(&c), "--data", s(&data),
        "--out", s(&report_path), "--csv", s(&csv_path),
    ]));
    let test = &trained["test"];
    for key in ["mean_cost", "feasibility_rate", "nu_mean"] {
        let (a, b) = (test[key].as_f64().unwrap(), printed[key].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{key}: {a} vs {b}");
    }

    // pooled feasibility recomputed from the stored h samples
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.records.len(), report.samples - report.pf_failures);
    let hs: Vec<&[f64]> = report.records.iter().map(|r| r.h.as_slice()).collect();
    assert_eq!(feasibility_rate(&hs, report.feasibility_tol), report.feasibility_rate);
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap().lines().count(), 2);

    let fdpf_path = dir.path().join("fdpf.json");
    stdout_json(&acopf(&[
        "eval", "--checkpoint", s(&model), "--case", s(&c), "--data", s(&data), "--solver", "fdpf",
        "--label", "fdpf-dual", "--out", s(&fdpf_path),
    ]));
    let merged = dir.path().join("table.csv");
    let out = stdout_json(&acopf(&["report", s(&report_path), s(&fdpf_path), "--out", s(&merged)]));
    assert_eq!(out["rows"].as_array().unwrap().len(), 2);
    let table = std::fs::read_to_string(&merged).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("label,"));
    assert!(rows[1].starts_with("model-nr,") && rows[2].starts_with("fdpf-dual,"));
}

#[test]
fn eval_rejects_a_checkpoint_for_another_case() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    stdout_json(&acopf(&[
        "train", "--case", s(&case("case9.m")), "--samples", "24", "--epochs", "1", "--out", s(&model),
    ]));
    let out = acopf(&["eval", "--checkpoint", s(&model), "--case", s(&case("case30.m")), "--samples", "24"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("checkpoint"));
}
