use std::path::Path;
use std::process::{Command, Output};

fn ipfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipfm"))
        .args(args)
        .current_dir(dir)
        .env_remove("IPFM_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"
n_data = 2000
aux_dims = ["inf"]
output_dir = "out"

[teacher]
hidden = [16, 16]
steps = 200

[distill]
budget = 640
eval_every = 5

[eval]
samples = 400
repeats = 1
probe_samples = 200
"#;

#[test]
fn check_passes_and_prints_one_line_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&ipfm(dir.path(), &["check"]));
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 20);
    assert!(!stdout.contains("FAIL "));
}

#[test]
fn teacher_distill_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let cfg = ["--config", "small.toml"];

    ok(&ipfm(dir.path(), &[&cfg[..], &["train-teacher"]].concat()));
    let teacher = dir.path().join("out/teachers/Dinf.ckpt");
    assert!(teacher.exists());

    ok(&ipfm(dir.path(), &[&cfg[..], &["distill", "--teacher", "out/teachers/Dinf.ckpt", "--budget", "320", "--out", "run"]].concat()));
    for f in ["generator.ckpt", "runlog.jsonl", "samples.csv", "metrics.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f} missing");
    }
    // the flag beats the config file: 320 samples at batch 32 is 10 updates
    let log = std::fs::read_to_string(dir.path().join("run/runlog.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["update_index"], 10);
    assert_eq!(last["D"], "inf");

    ok(&ipfm(dir.path(), &[&cfg[..], &["sample-generator", "--generator", "run/generator.ckpt", "--n", "300", "--out", "gen.csv"]].concat()));
    let csv = std::fs::read_to_string(dir.path().join("gen.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x0,x1");
    assert_eq!(csv.lines().count(), 301);

    let stdout = ok(&ipfm(dir.path(), &[&cfg[..], &["eval", "--samples", "gen.csv", "--out", "m.json"]].concat()));
    assert!(stdout.contains("energy_distance"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(m["energy_distance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn set_overrides_config_and_output_dir_overrides_both() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let out = ipfm(
        dir.path(),
        &["--config", "small.toml", "--set", "teacher.steps=50", "--output-dir", "elsewhere", "train-teacher"],
    );
    ok(&out);
    let stamp = std::fs::read_to_string(dir.path().join("elsewhere/teachers/Dinf.json")).unwrap();
    let stamp: serde_json::Value = serde_json::from_str(&stamp).unwrap();
    assert_eq!(stamp["teacher"]["steps"], 50);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = ipfm(dir.path(), &["--set", "no_equals_sign", "check"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ipfm(dir.path(), &["--set", "distill.alpha=\"x\"", "sample-generator", "--generator", "missing.ckpt", "--out", "a.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ipfm(dir.path(), &["distill", "--teacher", "missing.ckpt", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
}
