//! Exit-code and round-trip checks for the `autosize` binary: each error
//! class maps to its own code (2 config, 3 divergence, 4 format, 5
//! equivalence, 1 other), and run directories survive the
//! train/report/replay cycle.

use std::path::Path;
use std::process::{Command, Output};

fn autosize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autosize"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_TRAIN: &str = "\
[model]
d_model = 8
heads = 2
ffn_dim = 8
max_len = 16

[train]
epochs = 2
batch_size = 16
lr = 1e-3

[reg]
kind = \"l21\"
lambda = 0.1

[data]
vocab_size = 11
min_len = 2
max_len = 5
train = 48
dev = 12
test = 12
seed = 3
";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let out = autosize(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in ["prox-bench", "train", "search", "prune", "report", "replay"] {
        assert!(text.contains(name), "--help is missing {name}");
    }
}

#[test]
fn prox_bench_reports_agreement() {
    let out = autosize(&["prox-bench", "--sizes", "16,64", "--trials", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("agreement"));
    assert!(text.contains("pass"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_field = write_config(dir.path(), "[train]\nepochs = 2\nbogus = 1\n");
    let out = autosize(&["train", "--config", &unknown_field]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"));

    let contradictory = write_config(dir.path(), "[reg]\nkind = \"none\"\nlambda = 0.5\n");
    let out = autosize(&["train", "--config", &contradictory]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_config_file_exits_with_1() {
    let out = autosize(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn divergent_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let runaway = TINY_TRAIN.replace("lr = 1e-3", "lr = 1e18");
    let config = write_config(dir.path(), &runaway);
    let root = dir.path().join("runs");
    let out = autosize(&[
        "train",
        "--config",
        &config,
        "--out",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    // The partial run directory stays on disk for inspection.
    assert!(root.join("l21-0.1").join("manifest.records").exists());
}

#[test]
fn corrupted_checkpoint_magic_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTAMODELnonsense").unwrap();
    let out = autosize(&[
        "prune",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--output",
        dir.path().join("out.ckpt").to_str().unwrap(),
        "--report",
        dir.path().join("report.records").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn train_report_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_TRAIN);
    let root = dir.path().join("runs");
    let out = autosize(&[
        "train",
        "--config",
        &config,
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run_dir = root.join("l21-0.1");
    for artifact in [
        "manifest.records",
        "config.toml",
        "history.records",
        "best.ckpt",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }

    let out = autosize(&["report", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("l21"));

    let scratch = dir.path().join("scratch");
    let out = autosize(&[
        "replay",
        "--run",
        run_dir.to_str().unwrap(),
        "--scratch",
        scratch.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn tampered_run_directories_fail_replay() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_TRAIN);
    let root = dir.path().join("runs");
    let out = autosize(&[
        "train",
        "--config",
        &config,
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run_dir = root.join("l21-0.1");

    // A falsified record is an equivalence failure.
    let history = run_dir.join("history.records");
    let doctored = std::fs::read_to_string(&history)
        .unwrap()
        .replace("epoch=0", "epoch=9");
    std::fs::write(&history, doctored).unwrap();
    let out = autosize(&[
        "replay",
        "--run",
        run_dir.to_str().unwrap(),
        "--scratch",
        dir.path().join("scratch-a").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));

    // An edited config no longer matches the manifest hash, which is a
    // format failure before any training happens.
    let config_file = run_dir.join("config.toml");
    let mut text = std::fs::read_to_string(&config_file).unwrap();
    text.push_str("\n# note\n");
    std::fs::write(&config_file, text).unwrap();
    let out = autosize(&[
        "replay",
        "--run",
        run_dir.to_str().unwrap(),
        "--scratch",
        dir.path().join("scratch-b").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}
