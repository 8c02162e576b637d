//! End-to-end tests of the command-line interface: exit codes, output
//! schemas, flag precedence, and cross-run determinism.

use std::path::Path;
use std::process::{Command, Output};

use ddvi::pipeline::checkpoint;
use ddvi::pipeline::config::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddvi"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ddvi")
}

fn write_sine_csv(path: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let x = i as f64 / n as f64 * 6.0 - 3.0;
        text.push_str(&format!("{},{}\n", x, x.sin()));
    }
    std::fs::write(path, text).unwrap();
}

fn write_labels_csv(path: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let x = i as f64 / n as f64 * 2.0 - 1.0;
        text.push_str(&format!("{},{}\n", x, usize::from(x > 0.0)));
    }
    std::fs::write(path, text).unwrap();
}

const QUICK: &[&str] = &[
    "--set",
    "inducing=4",
    "--set",
    "score_hidden=8",
    "--set",
    "steps=5",
    "--set",
    "batch=16",
    "--set",
    "n_mc=1",
    "--set",
    "checkpoint_every=10",
];

#[test]
fn help_and_version_exit_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["train", "eval", "oracle-check", "grad-audit", "sample"] {
        assert!(text.contains(cmd), "help must list {cmd}");
    }
    assert!(run(&["--version"]).status.success());
    assert!(run(&["train", "--help"]).status.success());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    let out = run(&["train", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("--data"), "message must name the missing flag: {err}");
}

#[test]
fn missing_data_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/never.csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_csv_exits_one_with_row_number() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "1.0,2.0\n3.0,oops\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("row 2"), "error must locate the bad row: {err}");
}

#[test]
fn train_eval_sample_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sine.csv");
    write_sine_csv(&csv, 40);
    let out_dir = dir.path().join("run");

    let mut args = vec![
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iterations",
        "20",
        "--seed",
        "5",
    ];
    args.extend_from_slice(QUICK);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty(), "train keeps stdout clean for data");
    for f in ["checkpoint.ddvi", "metrics.csv", "test_split.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,elbo,prior,lik,l1,fix,wall_ms\n"));
    assert_eq!(metrics.lines().count(), 21);

    let ckpt = out_dir.join("checkpoint.ddvi");
    let eval_out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        out_dir.join("test_split.csv").to_str().unwrap(),
        "--n-samples",
        "8",
        "--seed",
        "3",
    ]);
    assert!(eval_out.status.success(), "{}", String::from_utf8_lossy(&eval_out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&eval_out.stdout).unwrap();
    assert!(json["rmse"].as_f64().unwrap().is_finite());
    assert!(json["nll"].as_f64().unwrap().is_finite());

    let s1 = run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--n", "4", "--seed", "9"]);
    let s2 = run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--n", "4", "--seed", "9"]);
    assert!(s1.status.success());
    assert_eq!(s1.stdout, s2.stdout, "sampling must be seed-deterministic");
    let text = String::from_utf8(s1.stdout.clone()).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        // Two layers of one output dim at four inducing points each.
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 8);
        assert!(vals.iter().all(|v| v.is_finite()));
    }
    let s3 = run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--n", "4", "--seed", "10"]);
    assert_ne!(s1.stdout, s3.stdout, "different seed must change the draws");
}

#[test]
fn classification_eval_reports_accuracy_and_auc() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("labels.csv");
    write_labels_csv(&csv, 40);
    let out_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iterations",
        "15",
        "--set",
        "task=classification",
    ];
    args.extend_from_slice(QUICK);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let eval_out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint.ddvi").to_str().unwrap(),
        "--data",
        out_dir.join("test_split.csv").to_str().unwrap(),
        "--n-samples",
        "4",
    ]);
    assert!(eval_out.status.success(), "{}", String::from_utf8_lossy(&eval_out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&eval_out.stdout).unwrap();
    let acc = json["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(json["nll"].as_f64().unwrap().is_finite());
    assert!(json.get("auc").is_some());
}

#[test]
fn flag_overrides_beat_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sine.csv");
    write_sine_csv(&csv, 30);
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "lr = 0.05\ninducing = 4\nscore_hidden = 8\nsteps = 5\nbatch = 16\nn_mc = 1\nseed = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iterations",
        "5",
        "--lr",
        "0.002",
        "--set",
        "n_mc=2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cp = checkpoint::load(&out_dir.join("checkpoint.ddvi")).unwrap();
    let cfg = TrainConfig::from_text(&cp.config_echo).unwrap();
    assert_eq!(cfg.lr, 0.002, "command line beats file");
    assert_eq!(cfg.n_mc, 2, "--set beats file");
    assert_eq!(cfg.inducing, 4, "file beats defaults");
    assert_eq!(cfg.seed, 2);
}

#[test]
fn resume_from_cli_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sine.csv");
    write_sine_csv(&csv, 30);

    let train_to = |out: &Path, iters: &str, resume: Option<&Path>| {
        let mut args = vec![
            "train",
            "--data",
            csv.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--iterations",
            iters,
            "--seed",
            "4",
        ];
        args.extend_from_slice(QUICK);
        let r;
        if let Some(p) = resume {
            r = p.to_str().unwrap().to_string();
            args.push("--resume");
            args.push(Box::leak(r.into_boxed_str()));
        }
        let out = run(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };

    let full = dir.path().join("full");
    train_to(&full, "14", None);
    let part = dir.path().join("part");
    train_to(&part, "7", None);
    let resumed = dir.path().join("resumed");
    train_to(&resumed, "14", Some(&part.join("checkpoint.ddvi")));

    let a = std::fs::read(full.join("checkpoint.ddvi")).unwrap();
    let b = std::fs::read(resumed.join("checkpoint.ddvi")).unwrap();
    assert_eq!(a, b, "resume must land on the uninterrupted bytes");
}

#[test]
fn oracle_check_passes_on_defaults() {
    let out = run(&["oracle-check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("PASS").count(), 2, "{text}");
    assert!(!text.contains("FAIL"));
    let seeded = run(&["oracle-check", "--seed", "123"]);
    assert!(seeded.status.success());
}

#[test]
fn grad_audit_passes_on_defaults() {
    let out = run(&["grad-audit"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS"), "{text}");
}

#[test]
fn invalid_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sine.csv");
    write_sine_csv(&csv, 20);
    let out = run(&[
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--set",
        "layers=0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--set",
        "no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
