//! End-to-end tests for the `forecast` binary.

use std::path::Path;
use std::process::{Command, Output};

fn forecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forecast"))
        .args(args)
        .output()
        .expect("spawn forecast")
}

fn ok(args: &[&str]) -> String {
    let out = forecast(args);
    assert!(
        out.status.success(),
        "forecast {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = forecast(args);
    assert!(!out.status.success(), "forecast {:?} unexpectedly succeeded", args);
    String::from_utf8(out.stderr).unwrap()
}

const FAST: &[&str] = &[
    "--set", "rate_hz=2", "--set", "d_model=8", "--set", "steps=3", "--set", "batch_size=1",
];

fn generate(dir: &Path, count: usize) {
    let mut args = vec!["generate", "--out", dir.to_str().unwrap()];
    let count_s = count.to_string();
    args.extend(["--count", &count_s, "--agents", "2", "--seed", "5"]);
    args.extend(FAST);
    ok(&args);
    let n = std::fs::read_dir(dir).unwrap().count();
    assert_eq!(n, count);
}

fn train(scen: &Path, ckpt: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--scenarios",
        scen.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ];
    args.extend(FAST);
    args.extend(extra);
    ok(&args);
    assert!(ckpt.exists());
}

#[test]
fn version_reports_schema_versions() {
    let out = ok(&["--version"]);
    assert!(out.contains("scenario schema v"), "{out}");
    assert!(out.contains("checkpoint schema v"), "{out}");
}

#[test]
fn full_pipeline_generate_train_eval_predict_attention_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = tmp.path().join("scenarios");
    generate(&scen, 3);

    let ckpt = tmp.path().join("model.ckpt");
    let loss_csv = tmp.path().join("loss.csv");
    train(&scen, &ckpt, &["--loss-csv", loss_csv.to_str().unwrap()]);
    let loss = std::fs::read_to_string(&loss_csv).unwrap();
    assert!(loss.starts_with("step,l_traj,l_conf,total\n"));
    assert_eq!(loss.lines().count(), 4); // header + 3 steps

    // eval writes a CSV and prints the same table
    let metrics_csv = tmp.path().join("metrics.csv");
    let mut args = vec![
        "eval",
        "--scenarios",
        scen.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        metrics_csv.to_str().unwrap(),
    ];
    args.extend(FAST);
    let stdout = ok(&args);
    let csv = std::fs::read_to_string(&metrics_csv).unwrap();
    assert!(csv.starts_with("K,minADE,minFDE,MR,brier_minFDE,n\n"));
    assert_eq!(csv.lines().count(), 3, "{csv}"); // K=1 and K=6
    assert!(stdout.contains("K,minADE,minFDE,MR,brier_minFDE,n"));

    // predict emits world-frame JSON with confidences and points
    let scenario0 = scen.join("scenario_0000.json");
    let mut args = vec![
        "predict",
        "--scenario",
        scenario0.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--refine",
    ];
    args.extend(FAST);
    let json = ok(&args);
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    let agents = parsed.as_array().unwrap();
    assert_eq!(agents.len(), 2);
    let modes = agents[0]["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 6);
    assert!(modes[0]["confidence"].as_f64().unwrap() > 0.0);
    assert_eq!(modes[0]["points"].as_array().unwrap().len(), 12);

    // attention dumps one JSON record per line
    let attn = tmp.path().join("attn.jsonl");
    let mut args = vec![
        "attention",
        "--scenario",
        scenario0.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        attn.to_str().unwrap(),
    ];
    args.extend(FAST);
    ok(&args);
    let dump = std::fs::read_to_string(&attn).unwrap();
    assert!(!dump.is_empty());
    for line in dump.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let a = rec["alpha"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert!(rec["relation"].is_string());
    }

    // ablation: full graph plus one removal set
    let ab = tmp.path().join("ablation.csv");
    let mut args = vec![
        "ablate",
        "--scenarios",
        scen.to_str().unwrap(),
        "--removals",
        "step_to_step",
        "--out",
        ab.to_str().unwrap(),
    ];
    args.extend(FAST);
    ok(&args);
    let csv = std::fs::read_to_string(&ab).unwrap();
    assert!(csv.starts_with("removed,K,minADE,minFDE,MR,brier_minFDE,n\n"));
    assert!(csv.contains("\nnone,"));
    assert!(csv.contains("\nstep_to_step,"));
}

#[test]
fn frozen_regime_requires_base_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = tmp.path().join("scenarios");
    generate(&scen, 1);
    let ckpt = tmp.path().join("model.ckpt");
    let mut args = vec![
        "train",
        "--scenarios",
        scen.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--regime",
        "frozen",
    ];
    args.extend(FAST);
    let err = fails(&args);
    assert!(err.contains("--base"), "{err}");
    assert!(err.lines().count() <= 2, "diagnosis should be short: {err}");
}

#[test]
fn frozen_regime_trains_on_top_of_base() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = tmp.path().join("scenarios");
    generate(&scen, 2);
    let base = tmp.path().join("base.ckpt");
    train(&scen, &base, &[]);
    let refined = tmp.path().join("refined.ckpt");
    train(
        &scen,
        &refined,
        &["--regime", "frozen", "--base", base.to_str().unwrap()],
    );
}

#[test]
fn bad_inputs_give_one_line_diagnoses() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = tmp.path().join("scenarios");
    generate(&scen, 1);
    let ckpt = tmp.path().join("model.ckpt");

    // unknown regime
    let mut args = vec![
        "train", "--scenarios", scen.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
        "--regime", "sideways",
    ];
    args.extend(FAST);
    let err = fails(&args);
    assert!(err.contains("sideways"), "{err}");

    // structural relation in an ablation
    let ab = tmp.path().join("ab.csv");
    let mut args = vec![
        "ablate", "--scenarios", scen.to_str().unwrap(), "--removals", "lane_succ",
        "--out", ab.to_str().unwrap(),
    ];
    args.extend(FAST);
    let err = fails(&args);
    assert!(err.contains("lane_succ"), "{err}");

    // missing checkpoint file
    let mut args = vec![
        "eval", "--scenarios", scen.to_str().unwrap(), "--checkpoint", "/nonexistent.ckpt",
    ];
    args.extend(FAST);
    let err = fails(&args);
    assert!(err.starts_with("error:"), "{err}");

    // empty scenario directory
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let mut args = vec![
        "train", "--scenarios", empty.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
    ];
    args.extend(FAST);
    let err = fails(&args);
    assert!(err.contains("no scenario"), "{err}");
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, "rate_hz = 2\nd_model = 8\nsteps = 2\nbatch_size = 1\n").unwrap();
    let scen = tmp.path().join("scenarios");
    ok(&[
        "generate", "--out", scen.to_str().unwrap(), "--count", "1", "--agents", "2",
        "--config", cfg_path.to_str().unwrap(),
    ]);
    let ckpt = tmp.path().join("m.ckpt");
    ok(&[
        "train", "--scenarios", scen.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(), "--set", "steps=1",
    ]);
    // invalid override is rejected
    let err = fails(&[
        "train", "--scenarios", scen.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(), "--set", "d_model=9", "--set", "heads=2",
    ]);
    assert!(err.contains("heads"), "{err}");
}
