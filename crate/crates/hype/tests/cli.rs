//! End-to-end checks of the `hype` binary: exit codes, artifact layout,
//! and the seed override.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hype"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hype-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).expect("write config");
    path
}

#[test]
fn missing_config_flag_exits_2() {
    let out = bin().output().expect("run");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unparseable_config_exits_2() {
    let dir = temp_dir("badcfg");
    let cfg = write_config(&dir, "bad.ini", "command = finetune\nnot a key value line\n");
    let out = bin().args(["--config"]).arg(&cfg).output().expect("run");
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_task_exits_2() {
    let dir = temp_dir("badtask");
    let cfg = write_config(
        &dir,
        "cfg.ini",
        "command = finetune\npretrain_steps = 0\n[model]\nn_layers = 1\nd_model = 8\nn_heads = 2\nd_ff = 16\n[data]\ntask = no_such_task\n",
    );
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .expect("run");
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn finetune_round_trip_writes_artifacts() {
    let dir = temp_dir("finetune");
    // Tiny model, no pretraining, heavy subsample: seconds, not minutes.
    let cfg = write_config(
        &dir,
        "cfg.ini",
        "command = finetune\ntechnique = hype_normal\nsubsample = 48\nepochs = 1\npretrain_steps = 0\nmax_len = 32\n\
         [model]\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\nmax_seq_len = 32\n\
         [noise]\nsigma = 1e-5\n",
    );
    let out_dir = dir.join("out");
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out_dir)
        .args(["--seed-override", "5", "--threads", "1"])
        .output()
        .expect("run");
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for artifact in ["resolved_config.json", "finetuned.ckpt", "run.json", "runs.csv"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    // The seed override must land in the resolved config and the record.
    let resolved = std::fs::read_to_string(out_dir.join("resolved_config.json")).expect("read");
    let v: serde_json::Value = serde_json::from_str(&resolved).expect("json");
    assert_eq!(v["seed"], 5);
    let record = std::fs::read_to_string(out_dir.join("run.json")).expect("read");
    let r: serde_json::Value = serde_json::from_str(&record).expect("json");
    assert_eq!(r["seed"], 5);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn json_only_format_skips_csv() {
    let dir = temp_dir("fmt");
    let cfg = write_config(
        &dir,
        "cfg.ini",
        "command = similarity\npretrain_steps = 0\nmax_len = 32\n\
         [model]\nn_layers = 1\nd_model = 16\nn_heads = 2\nd_ff = 32\nmax_seq_len = 32\n\
         [probe]\nmax_samples = 20\n",
    );
    let out_dir = dir.join("out");
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out_dir)
        .args(["--format", "json"])
        .output()
        .expect("run");
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("similarity.json").exists());
    assert!(!out_dir.join("similarity.csv").exists());
    let _ = std::fs::remove_dir_all(&dir);
}
