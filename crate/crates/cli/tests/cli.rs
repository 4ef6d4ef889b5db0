use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmota::config::{DataConfig, RunConfig};

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.data = DataConfig { n_train: 80, n_val: 2, n_test: 4 };
    cfg.train.epochs = 2;
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn cmota(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmota"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("CMOTA_SEED")
        .env_remove("CMOTA_ARM")
        .env_remove("CMOTA_FORCE")
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn prepared_run(tmp: &Path, name: &str, config: &Path) -> PathBuf {
    let out = tmp.join(name);
    ok(cmota(config, &out, &["gen-data"]));
    ok(cmota(config, &out, &["fit-codebook"]));
    out
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(cmota(&config, &a, &["gen-data"]));
    ok(cmota(&config, &b, &["gen-data"]));
    let (fa, fb) = (files(&a.join("data")), files(&b.join("data")));
    assert!(fa.len() > 80);
    assert_eq!(fa, fb);
}

#[test]
fn split_training_resumes_to_the_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let split = prepared_run(tmp.path(), "split", &config);
    let whole = prepared_run(tmp.path(), "whole", &config);
    ok(cmota(&config, &split, &["train", "--steps", "1"]));
    ok(cmota(&config, &split, &["train", "--steps", "1"]));
    ok(cmota(&config, &whole, &["train", "--steps", "2"]));
    let read = |d: &Path| fs::read(d.join("checkpoints/latest.bin")).unwrap();
    assert_eq!(read(&split), read(&whole));
    let log = fs::read_to_string(split.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn config_mismatch_is_refused_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = prepared_run(tmp.path(), "run", &config);
    ok(cmota(&config, &out, &["train", "--steps", "1"]));

    let refused = cmota(&config, &out, &["eval", "--arm", "tr"]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    let refused = cmota(&config, &out, &["train", "--steps", "1", "--arm", "tr"]);
    assert_eq!(refused.status.code(), Some(1));

    ok(cmota(&config, &out, &["eval"]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 20);
    ok(cmota(&config, &out, &["train", "--steps", "1", "--arm", "tr", "--force"]));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let empty = tmp.path().join("empty");
    assert_eq!(cmota(&config, &empty, &["train"]).status.code(), Some(2));
    assert_eq!(cmota(&config, &empty, &["fit-codebook"]).status.code(), Some(2));
    assert_eq!(cmota(&config, &empty, &["eval"]).status.code(), Some(2));
    assert_eq!(cmota(&config, &empty, &["train", "--arm", "nope"]).status.code(), Some(1));
    assert_eq!(cmota(&config, &empty, &["frobnicate"]).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_cmota")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn env_overrides_lose_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = tmp.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_cmota"))
        .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen-data"])
        .env("CMOTA_SEED", "99")
        .output()
        .unwrap();
    ok(o);
    let written = RunConfig::from_toml(&fs::read_to_string(out.join("data/config.toml")).unwrap()).unwrap();
    assert_eq!(written.seed, 99);

    let out2 = tmp.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_cmota"))
        .args(["--config", config.to_str().unwrap(), "--out", out2.to_str().unwrap(), "--seed", "3", "gen-data"])
        .env("CMOTA_SEED", "99")
        .output()
        .unwrap();
    ok(o);
    let written = RunConfig::from_toml(&fs::read_to_string(out2.join("data/config.toml")).unwrap()).unwrap();
    assert_eq!(written.seed, 3);
}

#[test]
fn sample_and_inspect_memory_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let out = prepared_run(tmp.path(), "run", &config);
    ok(cmota(&config, &out, &["train", "--steps", "1"]));
    ok(cmota(&config, &out, &["sample", "--text", "pororo run in the snow", "--text", "pororo jump"]));
    assert!(out.join("samples/frame_1.png").exists());
    let story: serde_json::Value = serde_json::from_slice(&fs::read(out.join("samples/story.json")).unwrap()).unwrap();
    assert_eq!(story["pseudo_texts"].as_array().unwrap().len(), 2);
    let raw = fs::read(out.join("samples/frame_0.raw")).unwrap();
    assert!(cmota::image::Image::read_raw(&raw[..]).is_ok());

    ok(cmota(&config, &out, &["inspect-memory"]));
    let dump = fs::read_to_string(out.join("memory/attention.jsonl")).unwrap();
    let kinds: Vec<String> = dump
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert!(kinds.iter().any(|k| k == "summary"));
    assert!(kinds.iter().any(|k| k == "attentive_weight"));
}
