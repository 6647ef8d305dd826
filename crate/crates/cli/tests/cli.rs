use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hignn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hignn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hignn(args);
    assert!(
        out.status.success(),
        "hignn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.higd");
    let b = dir.path().join("b.higd");
    let c = dir.path().join("c.higd");
    ok(&["gen", "--seed", "4", "--count", "20", "--out", p(&a)]);
    ok(&["gen", "--seed", "4", "--count", "20", "--out", p(&b)]);
    ok(&["gen", "--seed", "5", "--count", "20", "--out", p(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"samples": 3, "scenario": {"area_lenght": 300}}"#).unwrap();
    let out = hignn(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("x.higd"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("area_lenght"));

    fs::write(&cfg, r#"{"samples": 3, "scenario": {"area_length": 300}}"#).unwrap();
    ok(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("x.higd"))]);
}

#[test]
fn missing_input_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = hignn(&["fp", "--data", "/nonexistent.higd", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn fp_truncated_runs_three_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.higd");
    ok(&["gen", "--seed", "1", "--count", "5", "--out", p(&data)]);
    let out = dir.path().join("tr");
    ok(&["fp", "--data", p(&data), "--truncate", "3", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("fp.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("index,wsr,iterations,converged"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("3")));
    assert!(csv.contains("# seed=1\n") && csv.contains("# config_hash="));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("fp.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn train_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["gen", "--seed", "10", "--count", "48", "--out", p(&d("train.higd"))]);
    ok(&["gen", "--seed", "11", "--count", "12", "--out", p(&d("val.higd"))]);
    ok(&["gen", "--seed", "12", "--count", "12", "--out", p(&d("test.higd"))]);
    fs::write(d("train.json"), r#"{"max_epochs": 2, "batch_size": 16}"#).unwrap();
    let train_args = |out: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            p(&d("train.json")).into(),
            "--train".into(),
            p(&d("train.higd")).into(),
            "--val".into(),
            p(&d("val.higd")).into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            p(&d(out)).into(),
        ]
    };
    let a: Vec<String> = train_args("a.higc");
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let b: Vec<String> = train_args("b.higc");
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(d("a.higc")).unwrap(), fs::read(d("b.higc")).unwrap());
    assert!(d("a.history.csv").exists());

    ok(&["eval", "--checkpoint", p(&d("a.higc")), "--data", p(&d("test.higd")), "--out", p(&d("eval"))]);
    let csv = fs::read_to_string(d("eval").join("eval.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 13);

    fs::write(
        d("bench.json"),
        r#"{"scaling": {"steps": 1, "instances": 4}, "timing": {"scaling": {"steps": 1, "instances": 2}}}"#,
    )
    .unwrap();
    let out = ok(&[
        "bench",
        "all",
        "--checkpoint",
        p(&d("a.higc")),
        "--config",
        p(&d("bench.json")),
        "--out",
        p(&d("bench")),
    ]);
    for f in ["area_scaling.csv", "density_scaling.json", "timing.csv", "timing_summary.json"] {
        assert!(d("bench").join(f).exists(), "{f}");
    }
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("24 links"));
}

#[test]
fn check_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("check.json");
    fs::write(&cfg, r#"{"permutation_trials": 20, "feasibility_trials": 200}"#).unwrap();
    let out = ok(&["check", "--config", p(&cfg), "--out", p(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{stdout}");
    assert!(dir.path().join("check.json").exists());
}

#[test]
fn check_fails_nonzero_on_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("check.json");
    // An impossible tolerance must be reported as a failure.
    fs::write(
        &cfg,
        r#"{"gradient_tolerance": 0.0, "permutation_trials": 2, "feasibility_trials": 10}"#,
    )
    .unwrap();
    let out = hignn(&["check", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradient"));
}
