use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cpq() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cpq"));
    cmd.env_remove("CPQ_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    cpq().args(args).output().expect("spawn cpq")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Replay file where the truth is usually among the frequent samples.
fn write_replay(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("replay.jsonl");
    let mut text = String::new();
    for i in 0..n as u64 {
        let k = 2 + i % 9;
        let samples: Vec<String> = (0..30u64).map(|j| ((i * 7 + j * j) % k).to_string()).collect();
        let truth = if i % 5 == 0 { 99 } else { (i * 7) % k };
        text.push_str(&format!("{{\"id\":\"q{i}\",\"truth\":{truth},\"samples\":[{}]}}\n", samples.join(",")));
    }
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn estimate_writes_one_row_per_t() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("mm.csv");
    let res = run(&["estimate", "--dist", "uniform:100", "--trials", "100", "--tmax", "200", "--out", path_str(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,exact_mm,gt_mm_mean,gt_mm_std,exact_deriv,doubleton_mean,doubleton_std,naive_mean,naive_std");
    assert_eq!(lines.count(), 200);
}

#[test]
fn estimate_rejects_bad_distribution() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    for spec in ["geometric:1.5:100", "uniform:0", "poisson:3"] {
        let res = run(&["estimate", "--dist", spec, "--out", path_str(&out)]);
        assert_eq!(code(&res), 2, "{spec}");
    }
    assert!(!out.exists());
}

#[test]
fn estimate_is_reproducible_and_seed_env_is_honoured() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    let d = dir.path().join("d.csv");
    let base = ["estimate", "--dist", "geometric:0.05:100", "--trials", "20", "--tmax", "50"];
    for (p, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let mut args = base.to_vec();
        args.extend(["--seed", seed, "--out", path_str(p)]);
        assert_eq!(code(&run(&args)), 0);
    }
    let mut args = base.to_vec();
    args.extend(["--out", path_str(&d)]);
    assert_eq!(code(&cpq().args(&args).env("CPQ_SEED", "7").output().unwrap()), 0);

    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(read(&a), read(&d));

    // The flag wins over the environment.
    let e = dir.path().join("e.csv");
    let mut args = base.to_vec();
    args.extend(["--seed", "8", "--out", path_str(&e)]);
    assert_eq!(code(&cpq().args(&args).env("CPQ_SEED", "7").output().unwrap()), 0);
    assert_eq!(read(&e), read(&c));
}

#[test]
fn run_emits_one_row_per_alpha_sorted() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.csv");
    let res = run(&[
        "run", "--synthetic", "n=200", "--variant", "p1p2", "--alpha", "0.3,0.05,0.2,0.1", "--budget", "20",
        "--splits", "4", "--seed", "1", "--out", path_str(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let alphas: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(alphas, vec!["0.05", "0.1", "0.2", "0.3"]);
    assert!(text.lines().skip(1).all(|l| l.starts_with("p1p2,") && l.split(',').count() == 11));
}

#[test]
fn run_reports_input_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.csv");
    let res = run(&["run", "--data", "missing.jsonl", "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"a\",\"truth\":1,\"samples\":[1]}\n{\"id\":\"b\",\"truth\":1}\n").unwrap();
    let res = run(&["run", "--data", path_str(&bad), "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));

    let res = run(&["run", "--synthetic", "n=50", "--alpha", "1.5", "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);
    let res = run(&["run", "--synthetic", "n=50", "--data", "x.jsonl", "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);
    let res = run(&["run", "--synthetic", "n=50", "--frobnicate", "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());
}

#[test]
fn infeasible_threshold_sweep_exits_4() {
    let dir = TempDir::new().unwrap();
    let data = write_replay(dir.path(), 40);
    let out = dir.path().join("m.csv");
    let res = run(&[
        "run", "--data", path_str(&data), "--variant", "vanilla", "--tau-grid", "1", "--alpha", "0.01",
        "--splits", "2", "--out", path_str(&out),
    ]);
    assert_eq!(code(&res), 4, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn unwritable_output_exits_3() {
    let res = run(&["estimate", "--dist", "uniform:10", "--tmax", "5", "--out", "/nonexistent-dir/x/y.csv"]);
    assert_eq!(code(&res), 3);
}

#[test]
fn calibrate_then_predict_is_self_consistent() {
    let dir = TempDir::new().unwrap();
    let data = write_replay(dir.path(), 200);
    let model = dir.path().join("model.json");
    let preds = dir.path().join("preds.jsonl");
    let res = run(&[
        "calibrate", "--data", path_str(&data), "--alpha", "0.1", "--budget", "10", "--seed", "3", "--out", path_str(&model),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let res = run(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--out", path_str(&preds)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 200);
    assert!(lines.iter().all(|l| l["id"].is_string() && l["set"].is_array() && l["ee"].is_boolean()));
    let n = lines.len() as f64;
    let coverage = lines.iter().filter(|l| l["covered"].as_bool().unwrap()).count() as f64 / n;
    let stderr = (0.9 * 0.1 / n).sqrt();
    assert!(coverage >= 0.9 - 2.0 * stderr, "coverage {coverage}");

    // Reloading the model reproduces the same predictions.
    let again = dir.path().join("again.jsonl");
    assert_eq!(code(&run(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--out", path_str(&again)])), 0);
    assert_eq!(std::fs::read(&preds).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn infinite_quantile_model_always_includes_ee() {
    let dir = TempDir::new().unwrap();
    let data = write_replay(dir.path(), 20);
    let model = dir.path().join("model.json");
    std::fs::write(
        &model,
        r#"{"format":"cpq-calibration","version":1,"alpha":0.1,"beta_star":-0.01,"q_star":"inf",
            "estimator":{"gt_fallback":"empirical-frequency","clip_to_unit":true,"normalization":"scale-seen-to-complement"},
            "policy":{"beta_star":-0.01,"t_min":3,"t_max":30,"mode":{"kind":"adaptive"}},"seed":0}"#,
    )
    .unwrap();
    let preds = dir.path().join("p.jsonl");
    let res = run(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--out", path_str(&preds)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().count(), 20);
    assert!(text.lines().all(|l| l.contains("\"ee\":true") && l.contains("\"covered\":true")));
}

#[test]
fn model_version_mismatch_exits_5() {
    let dir = TempDir::new().unwrap();
    let data = write_replay(dir.path(), 20);
    let model = dir.path().join("model.json");
    std::fs::write(&model, r#"{"format":"cpq-calibration","version":9}"#).unwrap();
    let res = run(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--out", path_str(&dir.path().join("p"))]);
    assert_eq!(code(&res), 5);
}

#[test]
fn tune_beta_reports_a_budget_feasible_threshold() {
    let dir = TempDir::new().unwrap();
    let data = write_replay(dir.path(), 60);
    let out = dir.path().join("beta.json");
    let res = run(&["tune-beta", "--data", path_str(&data), "--budget", "8", "--seed", "2", "--out", path_str(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["beta_star"].as_f64().unwrap() <= 0.0);
    assert!(report["avg_queries"].as_f64().unwrap() <= 8.0);
    assert_eq!(report["candidates"].as_array().unwrap().len(), 40);

    let res = run(&["tune-beta", "--data", path_str(&data), "--budget", "8", "--seed", "2"]);
    assert_eq!(code(&res), 0);
    let printed: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(printed, report);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let outs: Vec<PathBuf> = ["1", "4"].iter().map(|j| dir.path().join(format!("j{j}.csv"))).collect();
    for (jobs, out) in ["1", "4"].iter().zip(&outs) {
        let res = run(&[
            "--jobs", jobs, "run", "--synthetic", "n=100", "--variant", "vanilla,p1,p1p2", "--splits", "4", "--out",
            path_str(out),
        ]);
        assert_eq!(code(&res), 0);
    }
    assert_eq!(std::fs::read(&outs[0]).unwrap(), std::fs::read(&outs[1]).unwrap());
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("estimate", &["--dist", "--trials", "--tmax", "--seed", "--out"]),
        ("run", &["--data", "--synthetic", "--variant", "--alpha", "--budget", "--splits", "--seed", "--out", "--t-min", "--t-max", "--no-split-cal", "--tau-points", "--tau-grid", "--gt-fallback", "--jobs"]),
        ("calibrate", &["--data", "--synthetic", "--alpha", "--budget", "--seed", "--out", "--t-min", "--t-max", "--no-split-cal"]),
        ("predict", &["--model", "--data", "--synthetic", "--seed", "--out"]),
        ("tune-beta", &["--data", "--synthetic", "--budget", "--seed", "--out", "--t-min", "--t-max"]),
    ];
    for (sub, flags) in expected {
        let res = run(&[sub, "--help"]);
        assert_eq!(code(&res), 0);
        let help = String::from_utf8_lossy(&res.stdout);
        for flag in *flags {
            assert!(help.contains(flag), "{sub} --help is missing {flag}");
        }
    }
}

#[test]
fn documented_run_reaches_target_coverage() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.csv");
    let res = run(&[
        "run", "--synthetic", "n=500", "--variant", "p1p2", "--alpha", "0.1", "--budget", "20", "--splits", "50",
        "--seed", "1", "--out", path_str(&out),
    ]);
    assert_eq!(code(&res), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let row = text.lines().nth(1).unwrap();
    let coverage: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!(coverage >= 0.88, "coverage {coverage}");
}
