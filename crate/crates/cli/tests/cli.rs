use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ckd_cli::config::Settings;
use ckd_core::train::read_metrics_log;
use ckd_core::KdKind;

const SMALL: &[&str] = &[
    "--per-class", "20", "--epochs", "2", "--teacher-epochs", "2", "--batch", "16", "--wall-clock", "off",
];

fn ckd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckd"))
        .args(args)
        .env_remove("CKD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ckd(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_layers_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.conf");
    fs::write(&file, "# file layer\ntau = 0.5\nbatch = 32\nepochs = 3\n").unwrap();
    let s = Settings::resolve(Some(&file), [("batch", "16"), ("kd", "vanilla")]).unwrap();
    assert_eq!(s.train.distill.tau, 0.5);
    assert_eq!(s.train.batch_size, 16);
    assert_eq!(s.train.epochs, 3);
    assert_eq!(s.train.kd_kind, KdKind::Vanilla);
    assert_eq!(s.train.base_lr, Settings::default().train.base_lr);

    let out = dir.path().join("out");
    let o = ckd(&[
        "train", "--config", file.to_str().unwrap(), "--out", out.to_str().unwrap(), "--batch", "8",
        "--per-class", "20", "--teacher-epochs", "1", "--epochs", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    for line in ["tau = 0.5", "batch = 8", "epochs = 1"] {
        assert!(written.lines().any(|l| l == line), "missing '{}' in\n{}", line, written);
    }
    let reread = Settings::resolve(Some(&out.join("config.txt")), []).unwrap();
    assert_eq!(reread.train.batch_size, 8);
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.conf");
    fs::write(&file, "tau = 1\ntemperature = 2\n").unwrap();
    let err = Settings::resolve(Some(&file), []).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("'temperature'"), "{}", err);

    let o = ckd(&["train", "--temperature", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--temperature"));
}

#[test]
fn zero_tau_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = train_into(&out, &["--tau", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
    assert!(!out.join("metrics.jsonl").exists());
    assert!(!out.join("teacher.ckpt").exists());
}

#[test]
fn ckd_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_into(dir.path(), &["--kd", "ckd", "--alpha", "100", "--tau", "1.0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = read_metrics_log(fs::read(dir.path().join("metrics.jsonl")).unwrap().as_slice()).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.kd_loss > 0.0 && r.wall_ms == 0));
    for f in ["teacher.ckpt", "teacher_metrics.jsonl", "student.ckpt", "train.ckds", "test.ckds"] {
        assert!(dir.path().join(f).exists(), "{}", f);
    }
}

#[test]
fn baseline_never_touches_a_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_into(dir.path(), &["--kd", "none", "--teacher", "/nonexistent/teacher.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = read_metrics_log(fs::read(dir.path().join("metrics.jsonl")).unwrap().as_slice()).unwrap();
    assert!(log.iter().all(|r| r.kd_loss == 0.0));
    assert!(!dir.path().join("teacher.ckpt").exists());
}

#[test]
fn missing_teacher_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_into(dir.path(), &["--teacher", "/nonexistent/teacher.ckpt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/teacher.ckpt"), "{}", stderr(&o));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--kd", "none"];
    args.extend_from_slice(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_ckd"))
        .args(&args)
        .env("CKD_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("metrics.jsonl").exists());

    let o = ckd(&args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("CKD_OUT_DIR"));
}

fn sweep(out: &Path, workers: &str) -> Output {
    let mut args = vec![
        "sweep", "--out", out.to_str().unwrap(), "--axis", "temperature", "--values", "0.5,2", "--repeats", "2",
        "--workers", workers,
    ];
    args.extend_from_slice(SMALL);
    ckd(&args)
}

#[test]
fn sweeps_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = sweep(&a, "1");
    let ob = sweep(&b, "3");
    assert!(oa.status.success() && ob.status.success(), "{}{}", stderr(&oa), stderr(&ob));
    let ra = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.csv")).unwrap());
    let text = String::from_utf8(ra).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("temperature,acc_seed0,acc_seed1,median,iqr,mean,failures"));
    let run = "runs/01-temperature=2/seed-1/metrics.jsonl";
    assert_eq!(fs::read(a.join(run)).unwrap(), fs::read(b.join(run)).unwrap());
}

#[test]
fn sweep_reports_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep", "--out", dir.path().to_str().unwrap(), "--axis", "batch_size", "--values", "16,5000",
        "--repeats", "1", "--kd", "none",
    ];
    args.extend_from_slice(SMALL);
    let o = ckd(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.lines().nth(2).unwrap().ends_with(",1"), "{}", report);
    assert!(dir.path().join("runs/01-batch_size=5000/seed-0/error.txt").exists());
}

#[test]
fn report_compares_and_flags_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (none, ckd_dir) = (dir.path().join("none"), dir.path().join("ckd"));
    assert!(train_into(&none, &["--kd", "none"]).status.success());
    assert!(train_into(&ckd_dir, &["--kd", "ckd", "--epochs", "3"]).status.success());

    let out = dir.path().join("cmp");
    let o = ckd(&[
        "report",
        none.join("metrics.jsonl").to_str().unwrap(),
        ckd_dir.join("metrics.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("truncated to the first 2"), "{}", stdout);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("none,"));
    assert!(summary.lines().nth(2).unwrap().starts_with("ckd,"));
    assert!(out.join("comparison.csv").exists() && out.join("plot.dat").exists());

    let broken = dir.path().join("broken.jsonl");
    let mut text = fs::read_to_string(none.join("metrics.jsonl")).unwrap();
    text.push_str("not json\n");
    fs::write(&broken, text).unwrap();
    let o = ckd(&["report", broken.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.jsonl") && stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn verify_passes_from_a_clean_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ckd"))
        .args(["verify", "--seed", "7"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 15);
    assert!(!stdout.contains("FAIL "));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}
