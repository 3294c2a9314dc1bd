use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn starpose(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_starpose"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("STAR_SEED")
        .output()
        .expect("spawn starpose")
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}\n{stderr}", out.status);
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn pose_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/pose_head.stck")
}

#[test]
fn synth_train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    ok(&starpose(wd, &["synth", "--count", "2", "--val-count", "1"]));
    assert!(wd.join("data/clips/train/00001/hr.tnsr").exists());

    let pose = pose_fixture();
    let pose = pose.to_str().unwrap();
    let quick = [
        "--set",
        "steps=2",
        "--set",
        "batch=1",
        "--set",
        "layers=1",
        "--set",
        "mbconv_stages=0",
    ];
    let mut args = vec!["train-sr", "--pose", pose];
    args.extend(quick);
    let text = ok(&starpose(wd, &args));
    assert!(text.contains("probe loss"), "{text}");
    let log = std::fs::read_to_string(wd.join("sr.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let csv = ok(&starpose(wd, &["eval", "--pose", pose]));
    assert!(csv.starts_with("method,metric,value\n"));
    assert!(csv.contains("model,psnr,") && csv.contains("bicubic,pck,"));
    assert!(wd.join("eval.csv").exists());

    let wrong = starpose(wd, &["eval", "--pose", pose, "--scale", "2"]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("scale"));
}

#[test]
fn missing_pose_head_is_reported_with_its_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = starpose(dir.path(), &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("starpose pretrain-pose"));
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = starpose(dir.path(), &["train-sr", "--set", "widgets=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widgets"));
}

#[test]
fn selftest_passes_without_timing() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&starpose(dir.path(), &["selftest", "--no-timing"]));
    assert!(text.contains(", 0 failed"), "{text}");
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("bench.csv");
    let out = out_path.to_str().unwrap();
    ok(&starpose(
        dir.path(),
        &["bench-attn", "--n", "64,128", "--dh", "8", "--reps", "11", "--out", out],
    ));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert!(csv.lines().count() > 2, "{csv}");
}
