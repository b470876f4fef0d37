use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempedit")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Tiny dataset plus a one-step checkpoint, shared by the tests below.
fn fixture(dir: &Path) {
    let config = serde_json::json!({
        "denoiser": { "embed_dim": 8, "layers": 1, "heads": 1 },
        "data": { "counts": { "MOVE": 2, "RECOLOR": 2 }, "seed": 1, "with_frames": false },
        "train": { "steps": 1, "batch_size": 2 },
        "sampler": { "steps": 4, "reason_steps": 1 },
    });
    fs::write(dir.join("config.json"), serde_json::to_vec(&config).unwrap()).unwrap();
    let cfg = dir.join("config.json");
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.join("data"))]).status.success());
    let out = run(&["train", "--config", s(&cfg), "--manifest", s(&dir.join("data")), "--out", s(&dir.join("train"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["sample", "--out", s(dir.path()), "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["sample", "--out", s(dir.path()), "--solver", "rk4"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--out", s(dir.path()), "--count", "spin=3"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--out", s(dir.path()), "--range", "5..2"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = run(&["sample", "--out", s(&dir.path().join("o")), "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn sample_without_reasoning_and_with_full_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let ck = d.join("train/checkpoint.ckpt");
    let common = |name: &str| vec!["--config".to_string(), s(&d.join("config.json")).into(), "--checkpoint".into(), s(&ck).into(), "--manifest".into(), s(&d.join("data")).into(), "--out".into(), s(&d.join(name)).into()];

    let mut args = vec!["sample".to_string()];
    args.extend(common("plain"));
    args.extend(["--reason-steps".into(), "0".into(), "--episode".into(), "3".into()]);
    let out = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("plain/output.ppm").exists());
    assert!(d.join("plain/score.json").exists());
    let repro = json(&d.join("plain/repro.json"));
    assert_eq!(repro["config"]["sampler"]["reason_steps"], 0);
    assert_eq!(repro["knots"].as_array().unwrap().len(), 5);

    let mut args = vec!["trajectory".to_string()];
    args.extend(common("traj"));
    args.extend(["--reason-steps".into(), "4".into(), "--solver".into(), "heun".into()]);
    let out = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("traj/trajectory.ppm").exists());
    assert!(d.join("traj/index.json").exists());

    // more reasoning steps than total steps is a contract error, not a panic
    let mut args = vec!["sample".to_string()];
    args.extend(common("bad"));
    args.extend(["--reason-steps".into(), "9".into()]);
    assert_eq!(run(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(1));
}

#[test]
fn distill_flags_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let out = run(&[
        "distill",
        "--config",
        s(&d.join("config.json")),
        "--checkpoint",
        s(&d.join("train/checkpoint.ckpt")),
        "--manifest",
        s(&d.join("data")),
        "--student-steps",
        "2",
        "--update-ratio",
        "3",
        "--cycles",
        "2",
        "--lr",
        "1e-5",
        "--out",
        s(&d.join("dist")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = &json(&d.join("dist/repro.json"))["config"]["distill"];
    assert_eq!(c["student_steps"], 2);
    assert_eq!(c["update_ratio"], 3);
    assert_eq!(c["steps"], 2);
    assert_eq!(c["lr"], 1e-5);
    let log = fs::read_to_string(d.join("dist/distill_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(d.join("dist/student.ckpt").exists());
}

#[test]
fn eval_scores_do_not_depend_on_the_range_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let eval = |range: &str, name: &str| {
        let out = run(&[
            "eval",
            "--config",
            s(&d.join("config.json")),
            "--checkpoint",
            s(&d.join("train/checkpoint.ckpt")),
            "--manifest",
            s(&d.join("data")),
            "--range",
            range,
            "--out",
            s(&d.join(name)),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        json(&d.join(name).join("report.json"))
    };
    let all = eval("0..4", "all");
    let head = eval("0..2", "head");
    let tail = eval("2..4", "tail");
    assert_eq!(all["episodes"], 4);
    let mse = |r: &serde_json::Value| r["identity_mse"].as_f64().unwrap();
    // per-episode seeds come from the episode id, so the pooled mean is the
    // mean of the halves
    assert!((mse(&all) - 0.5 * (mse(&head) + mse(&tail))).abs() < 1e-12);
}

#[test]
fn tampered_repro_block_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(&["oracle-check", "--steps", "4", "--reason-steps", "1", "--samples", "4", "--out", s(&d.join("a"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut block = json(&d.join("a/repro.json"));
    block["config"]["sampler"]["steps"] = 5.into();
    fs::write(d.join("tampered.json"), serde_json::to_vec(&block).unwrap()).unwrap();
    let out = run(&["oracle-check", "--config", s(&d.join("tampered.json")), "--out", s(&d.join("b"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));

    // a block replayed under a different command is refused too
    let out = run(&["sample", "--config", s(&d.join("a/repro.json")), "--oracle", "--out", s(&d.join("c"))]);
    assert_eq!(out.status.code(), Some(1));
}
