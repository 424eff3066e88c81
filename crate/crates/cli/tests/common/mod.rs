#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small settings so every subcommand finishes in seconds.
pub const FAST_CONFIG: &str = r#"{
  "seed": 3,
  "mean_code": {"k_samples": 2000},
  "inversion": {"steps": 20},
  "encoder": {"batch_size": 2, "iterations": 5},
  "ablation": {"lambdas": [0.0, 1.0], "n_targets": 2},
  "editing": {"n_samples": 400, "lec_targets": 3},
  "properties": {"z_seeds": 1, "z_steps": 10}
}
"#;

pub fn lsap(args: &[&str]) -> Output {
    lsap_env(args, &[])
}

pub fn lsap_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lsap"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("lsap runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = lsap(args);
    assert!(
        out.status.success(),
        "lsap {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every subcommand in dependency order under `root`; returns the step
/// directories.
pub fn run_battery(root: &Path, env: &[(&str, &str)]) -> Vec<PathBuf> {
    let cfg = root.join("config.json");
    fs::write(&cfg, FAST_CONFIG).unwrap();
    let d = |name: &str| root.join(name);
    let gen = d("gen").join("generator.lsag");
    let mean = d("mean").join("mean_code.bin");
    let sample = d("sample");
    let enc = d("train").join("encoder.lsae");
    let dir = d("direction").join("direction.bin");
    let c = s(&cfg).to_string();
    let run = |args: Vec<String>| {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = lsap_env(&a, env);
        assert!(
            out.status.success(),
            "lsap {:?} failed: {}",
            a,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let v = |xs: &[&str]| -> Vec<String> { xs.iter().map(|x| x.to_string()).collect() };

    run(v(&["init-gen", "--config", &c, "--out", s(&d("gen"))]));
    run(v(&["mean-code", "--config", &c, "--gen", s(&gen), "--out", s(&d("mean"))]));
    run(v(&["sample", "--config", &c, "--gen", s(&gen), "--n", "4", "--out", s(&sample)]));
    let target = sample.join("sample_0000.png");
    run(v(&[
        "invert", "--config", &c, "--gen", s(&gen), "--mean-code", s(&mean),
        "--target", s(&target), "--out", s(&d("invert")),
    ]));
    run(v(&[
        "train-encoder", "--config", &c, "--gen", s(&gen), "--mean-code", s(&mean),
        "--out", s(&d("train")),
    ]));
    run(v(&[
        "encode", "--config", &c, "--encoder", s(&enc), "--target", s(&target),
        "--gen", s(&gen), "--out", s(&d("encode")),
    ]));
    run(v(&[
        "nscd", "--config", &c, "--codes", s(&sample.join("codes_sn.bin")),
        "--mean-code", s(&mean), "--out", s(&d("nscd")),
    ]));
    run(v(&["find-direction", "--config", &c, "--gen", s(&gen), "--out", s(&d("direction"))]));
    run(v(&[
        "edit", "--config", &c, "--code", s(&sample.join("codes_w.bin")),
        "--direction", s(&dir), "--alpha", "-1.5", "--gen", s(&gen), "--out", s(&d("edit")),
    ]));
    run(v(&[
        "lec", "--config", &c, "--gen", s(&gen), "--direction", s(&dir),
        "--encoder", s(&enc), "--out", s(&d("lec")),
    ]));
    run(v(&[
        "ablate", "--config", &c, "--gen", s(&gen), "--mean-code", s(&mean),
        "--steps", "10", "--out", s(&d("ablate")),
    ]));
    run(v(&["props", "--config", &c, "--gen", s(&gen), "--out", s(&d("props"))]));
    run(v(&[
        "project", "--config", &c, "--codes", s(&sample.join("codes_w.bin")),
        "--gen", s(&gen), "--out", s(&d("project")),
    ]));
    [
        "gen", "mean", "sample", "invert", "train", "encode", "nscd", "direction", "edit",
        "lec", "ablate", "props", "project",
    ]
    .iter()
    .map(|n| d(n))
    .collect()
}

/// Relative path to bytes for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Files whose bytes differ between two snapshots, or exist in only one.
pub fn differing(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
