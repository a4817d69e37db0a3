//! Runs the `dear` binary as a user would.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dear");

const SUBCOMMANDS: [&str; 7] = ["synth", "dataset", "train", "resume", "eval", "infer", "selftest"];

const TINY: &str = "\
lr = 0.001
batch_size = 4
queries = 64
latent_channels = 4
feature_channels = 4
res_blocks = 1
mlp_hidden = 8
";

fn dear(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dear(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dear(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_reports_the_checkpoint_format() {
    let text = ok(&["--version"]);
    assert!(text.contains("checkpoint format v1"), "{text}");
}

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let text = ok(&[sub, "--help"]);
        assert!(text.contains("Usage"), "{sub}: {text}");
    }
}

#[test]
fn bad_arguments_exit_with_2() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(code(&["infer", "--scale", "4"]), 2);
    assert_eq!(code(&["eval", "--baseline", "nonsense", "--data", "x", "--out", "y"]), 3, "missing manifest is checked first");
}

#[test]
fn unreadable_files_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.ckpt");
    let out = tmp.path().join("o.png");
    assert_eq!(code(&["infer", "--model", s(&missing), "--input", "x.png", "--out", s(&out)]), 3);
    let bogus = tmp.path().join("b.ckpt");
    fs::write(&bogus, "not a checkpoint").unwrap();
    assert_eq!(code(&["infer", "--model", s(&bogus), "--input", "x.png", "--out", s(&out)]), 3);
}

#[test]
fn out_of_range_values_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    ok(&["synth", "--out", s(&hr), "--count", "1", "--size", "32"]);
    let code = code(&["dataset", "--hr-dir", s(&hr), "--out", s(&tmp.path().join("d")), "--coverage-min", "0.5", "--coverage-max", "0.2"]);
    assert_eq!(code, 2);
}

#[test]
fn selftest_passes() {
    let text = ok(&["selftest"]);
    assert!(text.contains("checks passed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn divergence_exits_with_5() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["synth", "--out", s(&p("hr")), "--count", "4", "--size", "32"]);
    ok(&["dataset", "--hr-dir", s(&p("hr")), "--out", s(&p("ds"))]);
    fs::write(p("c.toml"), TINY.replace("lr = 0.001", "lr = 1e38")).unwrap();
    let manifest = p("ds").join("manifest.jsonl");
    let (cfg, run) = (p("c.toml"), p("run"));
    assert_eq!(code(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run), "--epochs", "20"]), 5);
    assert!(p("run").join("divergence.txt").exists());
}

#[test]
fn synth_dataset_train_eval_infer_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["--seed", "3", "synth", "--out", s(&p("hr")), "--count", "4", "--size", "32"]);
    ok(&["--seed", "3", "dataset", "--hr-dir", s(&p("hr")), "--out", s(&p("ds")), "--scale", "4"]);
    let manifest = p("ds").join("manifest.jsonl");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 4);

    fs::write(p("c.toml"), TINY).unwrap();
    ok(&["train", "--config", s(&p("c.toml")), "--data", s(&manifest), "--out", s(&p("run")), "--epochs", "2", "--ensemble", "invdist"]);
    let saved = fs::read_to_string(p("run").join("config.toml")).unwrap();
    assert!(saved.contains("ensemble = \"invdist\""), "{saved}");
    assert_eq!(fs::read_to_string(p("run").join("metrics.csv")).unwrap().lines().count(), 3);

    ok(&["eval", "--model", s(&p("run")), "--data", s(&manifest), "--out", s(&p("dear.csv"))]);
    ok(&["eval", "--baseline", "inpaint_then_bi", "--data", s(&manifest), "--out", s(&p("base.csv"))]);
    let csv = fs::read_to_string(p("dear.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "header, four images and the mean:\n{csv}");

    let lr = p("ds").join("lr_masked").join("hr_0000.png");
    let mask = p("ds").join("mask").join("hr_0000.png");
    assert!(lr.exists() && mask.exists());
    let text = ok(&[
        "infer", "--model", s(&p("run")), "--input", s(&lr), "--mask", s(&mask), "--scale", "2.5", "--out", s(&p("up.png")),
        "--dump-importance", s(&p("imp.png")), "--chunk-size", "100",
    ]);
    assert!(text.contains("20×20"), "{text}");
    assert!(p("up.png").exists() && p("imp.png").exists());

    ok(&["resume", "--checkpoint", s(&p("run")), "--data", s(&manifest), "--out", s(&p("run")), "--epochs", "3"]);
    assert_eq!(fs::read_to_string(p("run").join("metrics.csv")).unwrap().lines().count(), 4);
}
