//! Helpers shared by the command-line test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn raf(args: &[&str]) -> Output {
    raf_env(args, None)
}

pub fn raf_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_raf"));
    cmd.args(args).env_remove("RAF_SEED");
    if let Some(s) = seed_env {
        cmd.env("RAF_SEED", s);
    }
    cmd.output().expect("spawn raf")
}

pub fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Eight identities × 25 frames of 4-D features.
pub fn bank_csv(dir: &Path) -> PathBuf {
    let mut s = String::from("identity_id,frame_id,f0,f1,f2,f3\n");
    for id in 0..8 {
        for f in 0..25 {
            let t = (id * 25 + f) as f64;
            s += &format!(
                "id{id},fr{f:02},{},{},{},{}\n",
                (t * 0.37).sin(),
                (t * 0.11).cos(),
                id as f64 * 0.1,
                (t * 0.05).sin() * 0.5
            );
        }
    }
    let path = dir.join("bank.csv");
    fs::write(&path, s).unwrap();
    path
}

pub fn subject_csv(dir: &Path, name: &str, shift: f64) -> PathBuf {
    let mut s = String::from("identity_id,frame_id,f0,f1,f2,f3\n");
    for f in 0..20 {
        let t = f as f64;
        s += &format!("subject,s{f:02},{},{},{},0.2\n", 0.3 * (t * 0.4).sin() + shift, 0.2 * (t * 0.9).cos(), 0.05 * t);
    }
    let path = dir.join(name);
    fs::write(&path, s).unwrap();
    path
}

pub fn build_bank(dir: &Path) -> PathBuf {
    let out = dir.join("b.rafb");
    ok(&raf(&[
        "build-bank",
        "--input",
        p(&bank_csv(dir)),
        "--dim",
        "4",
        "--per-identity",
        "20",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]));
    out
}

pub const GEN_CONFIG: &str = r#"{
  "experiment": {"world": {"n_points": 36, "grid": 16}, "bank_identities": 6, "frames_per_identity": 40, "train_frames": 12, "heldout_frames": 6}
}"#;

pub const TOY_CONFIG: &str = r#"{
  "experiment": {"world": {"n_points": 36, "grid": 16}, "bank_identities": 6, "frames_per_identity": 40, "train_frames": 12, "heldout_frames": 6},
  "params": {"grid": 16, "hidden": 12},
  "epochs": 4
}"#;

/// Runs `args` twice with the same output location and checks the artifacts
/// match byte for byte. `{out}` in `args` is replaced by a path inside a
/// scratch directory that is emptied between the runs.
pub fn assert_deterministic(args: &[&str]) {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().join("out");
    let argv: Vec<String> = args.iter().map(|a| a.replace("{out}", p(&o))).collect();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(&raf(&argv));
        let snap = snapshot(d.path());
        assert!(!snap.is_empty());
        runs.push(snap);
        for e in fs::read_dir(d.path()).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                fs::remove_dir_all(&path).unwrap()
            } else {
                fs::remove_file(&path).unwrap()
            }
        }
    }
    assert_eq!(runs[0].keys().collect::<Vec<_>>(), runs[1].keys().collect::<Vec<_>>());
    for (k, v) in &runs[0] {
        assert!(v == &runs[1][k], "{} differs between runs of {args:?}", k.display());
    }
}
