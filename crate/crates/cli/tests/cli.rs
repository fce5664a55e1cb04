//! Black-box tests of the binary: exit codes, artifacts, override precedence.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_doublemix"))
}

fn write_dataset(path: &Path, n: usize) {
    let words = [
        ["bright", "calm", "gentle", "warm"],
        ["dark", "harsh", "cold", "slow"],
    ];
    let mut out = String::new();
    for i in 0..n {
        let pool = words[i % 2];
        let text: Vec<&str> = (0..6).map(|j| pool[(i + j) % 4]).collect();
        let label = if i % 2 == 0 { "pos" } else { "neg" };
        out.push_str(&format!(
            "{{\"text\": \"{}\", \"label\": \"{label}\"}}\n",
            text.join(" ")
        ));
    }
    std::fs::write(path, out).unwrap();
}

fn setup(dir: &Path) -> String {
    write_dataset(&dir.join("train.jsonl"), 24);
    write_dataset(&dir.join("dev.jsonl"), 8);
    write_dataset(&dir.join("test.jsonl"), 8);
    std::fs::write(dir.join("lexicon.tsv"), "bright\tcalm\ncalm\tbright\n").unwrap();
    let cfg = format!(
        "train_path = {0}/train.jsonl\ndev_path = {0}/dev.jsonl\ntest_path = {0}/test.jsonl\n\
         lexicon_path = {0}/lexicon.tsv\nout_dir = {0}/out\nembed_dim = 8\nhidden_dim = 8\n\
         num_layers = 2\nlayer_set = 1,2\nepochs = 1\nseeds = 1\n",
        dir.display()
    );
    let cfg_path = dir.join("lab.cfg");
    std::fs::write(&cfg_path, cfg).unwrap();
    cfg_path.display().to_string()
}

#[test]
fn train_writes_metrics_checkpoint_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = bin().args(["train", "--config", &cfg]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    for f in ["metrics.json", "checkpoint_seed1.json", "vocab.json", "effective_config.txt"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out_dir.join("metrics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(v["runs"].is_array() && v["mean"]["accuracy"].is_number());
}

#[test]
fn overrides_beat_config_file_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = bin()
        .args(["train", "--config", &cfg, "--epochs=2", "--seed=5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo =
        std::fs::read_to_string(dir.path().join("out/effective_config.txt")).unwrap();
    assert!(echo.contains("epochs = 2"));
    assert!(echo.contains("seeds = 5"));
    assert!(dir.path().join("out/checkpoint_seed5.json").exists());
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = bin()
        .args(["train", "--config", &cfg, "--warp_factor=9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_factor"));
}

#[test]
fn missing_command_and_missing_file_exit_one() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--config", &format!("{}/absent.cfg", dir.path().display())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.cfg"));
}

#[test]
fn eval_round_trips_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    assert!(bin().args(["train", "--config", &cfg]).status().unwrap().success());
    let ckpt = dir.path().join("out/checkpoint_seed1.json");
    let out = bin()
        .args(["eval", "--config", &cfg, "--checkpoint", &ckpt.display().to_string()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/eval.json").exists());
}

#[test]
fn preview_augment_prints_variants_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = bin()
        .args(["preview-augment", "--config", &cfg, "--n=2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 4);
    assert!(!dir.path().join("out/metrics.json").exists());
}
