//! Drives the `slotsam` binary on the tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn slotsam(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotsam"))
        .arg("--config")
        .arg(tiny_config())
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env_remove("SLOTSAM_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Summary record of report.jsonl with timing removed.
fn summary(run_dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(run_dir.join("report.jsonl")).expect("report");
    let mut v: serde_json::Value = serde_json::from_str(text.lines().last().expect("summary line")).expect("json");
    v.as_object_mut().expect("object").remove("wall_time_secs");
    v
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(slotsam(dir.path(), &["gen-data"]));
    assert!(first.contains("wrote 24 samples"), "{first}");
    let manifest = fs::read(dir.path().join("data/manifest.json")).unwrap();
    let ids = fs::read_dir(dir.path().join("data/target_test")).unwrap().count();
    assert_eq!(ids, 4);

    let refused = slotsam(dir.path(), &["gen-data"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(stderr(&refused).contains("--force"));

    let again = ok(slotsam(dir.path(), &["gen-data", "--force"]));
    assert_eq!(again, first);
    assert_eq!(fs::read(dir.path().join("data/manifest.json")).unwrap(), manifest);

    let other = ok(slotsam(dir.path(), &["gen-data", "--force", "--seed", "8"]));
    assert_ne!(other, first);
}

#[test]
fn configuration_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nstage1_lrr = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slotsam"))
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--run-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stage1_lrr"), "{}", stderr(&out));

    let out = slotsam(dir.path(), &["eval", "--prompts", "box,lasso"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lasso"));

    let out = slotsam(dir.path(), &["train", "--stage", "stage3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = slotsam(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1), "training without data is a runtime failure");
}

#[test]
fn env_var_sets_run_dir_and_flag_wins() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let run = |with_flag: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_slotsam"));
        c.arg("gen-data").arg("--config").arg(tiny_config()).env("SLOTSAM_RUN_DIR", env_dir.path());
        if with_flag {
            c.arg("--run-dir").arg(flag_dir.path());
        }
        c.output().unwrap()
    };
    ok(run(false));
    assert!(env_dir.path().join("data/manifest.json").exists());
    ok(run(true));
    assert!(flag_dir.path().join("data/manifest.json").exists());
}

#[test]
fn staged_training_matches_one_shot_and_eval_is_reproducible() {
    let whole = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    for d in [whole.path(), staged.path()] {
        ok(slotsam(d, &["gen-data"]));
    }

    let out = ok(slotsam(staged.path(), &["train", "--stage", "stage1"]));
    assert!(out.contains("stage `stage1`"), "{out}");
    let s1 = summary(staged.path());
    assert_eq!(s1["bootstrap_events"], serde_json::json!([]));
    assert!(staged.path().join("checkpoints/latest.ckpt").exists());

    let refused = slotsam(staged.path(), &["train", "--stage", "stage1"]);
    assert_eq!(refused.status.code(), Some(2));

    ok(slotsam(staged.path(), &["train", "--stage", "stage2"]));
    ok(slotsam(whole.path(), &["train"]));
    assert_eq!(summary(whole.path()), summary(staged.path()));
    let epochs = |d: &Path| fs::read_to_string(d.join("report.jsonl")).unwrap().lines().count();
    assert_eq!(epochs(whole.path()), 4);
    assert!(whole.path().join("checkpoints/best.ckpt").exists());
    assert!(whole.path().join("viz/epoch_000_val_000.png").exists());

    let eval_file = |d: &Path| fs::read(d.join("eval/anchor_target_test.json")).unwrap();
    ok(slotsam(whole.path(), &["eval"]));
    let first = eval_file(whole.path());
    ok(slotsam(whole.path(), &["eval"]));
    assert_eq!(eval_file(whole.path()), first);
    ok(slotsam(staged.path(), &["eval"]));
    assert_eq!(eval_file(staged.path()), first);
    let tsv = fs::read_to_string(whole.path().join("eval/anchor_target_test.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 4 * 3);

    let out = ok(slotsam(whole.path(), &["eval", "--role", "source", "--prompts", "poly,box,poly"]));
    assert_eq!(out.lines().filter(|l| l.contains("mIoU")).count(), 2);

    // a different learning rate changes the config hash
    let other = whole.path().join("other.toml");
    let text = fs::read_to_string(tiny_config()).unwrap().replace("[train]\n", "[train]\nstage2_lr = 0.5\n");
    fs::write(&other, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slotsam"))
        .args(["eval", "--config"])
        .arg(&other)
        .arg("--run-dir")
        .arg(whole.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("hashes to"), "{}", stderr(&out));

    let out = ok(slotsam(whole.path(), &["viz", "--ids", "2,0,2"]));
    let written: Vec<&str> = out.lines().collect();
    assert_eq!(written.len(), 2);
    assert!(written[0].ends_with("target_test_000000_anchor.png"));
    assert!(Path::new(written[1]).exists());
    let out = slotsam(whole.path(), &["viz", "--ids", "0,99"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("99"));

    let out = ok(slotsam(whole.path(), &["train", "--force", "--stage", "stage1"]));
    assert!(out.contains("stage `stage1`"));
    assert!(!whole.path().join("eval").exists());
}
