use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchbridge")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn dir_digest(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--seed", "7", "--n", "100", "--out", s(&a)]);
    ok(&["gen-data", "--seed", "7", "--n", "100", "--out", s(&b)]);
    assert_eq!(dir_digest(&a), dir_digest(&b));
    assert_eq!(fs::read_dir(a.join("train/images")).unwrap().count(), 100);
    assert_eq!(fs::read_to_string(a.join("train/captions.jsonl")).unwrap().lines().count(), 100);
}

#[test]
fn bad_flags_exit_two_with_usage() {
    let out = bin(&["gen-data", "--n", "ten"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["sweep", "--kind", "nope", "--ckpt", "x"]).status.code(), Some(2));
    assert_eq!(bin(&["train-branch", "--out", "x", "--variant", "vae"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let out = bin(&["eval", "--ckpt", s(&t.path().join("missing.bin")), "--data", s(t.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let data = t.path().join("data");
    ok(&["gen-data", "--n", "4", "--val", "2", "--out", s(&data)]);
    let out = bin(&["train-branch", "--data", s(&data), "--out", s(&t.path().join("x.bin"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    let data = p("data");
    ok(&["gen-data", "--seed", "3", "--n", "8", "--val", "4", "--out", s(&data)]);
    let common = ["--data", s(&data), "--batch", "2", "--steps", "2"];
    let pre = p("pre.bin");
    let log = p("log.csv");
    ok(&[&["pretrain", "--out", s(&pre), "--log", s(&log)][..], &common].concat());
    let br = p("branch.bin");
    ok(&[&["train-branch", "--from", s(&pre), "--out", s(&br), "--log", s(&log)][..], &common].concat());
    let cn = p("cn.bin");
    ok(&[&["train-cn", "--from", s(&br), "--out", s(&cn), "--log", s(&log)][..], &common].concat());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 7);

    let fast = ["--samples", "2", "--sample-steps", "2", "--decode-steps", "4"];
    let gen = p("gen");
    ok(&[&["generate", "--ckpt", s(&cn), "--caption", "a red circle above a blue square", "--out", s(&gen)][..], &fast].concat());
    assert!(gen.join("image.ppm").exists() && gen.join("grid.bin").exists());

    let rep = p("reports");
    ok(&[&["eval", "--ckpt", s(&cn), "--data", s(&data), "--out", s(&rep)][..], &fast].concat());
    assert_eq!(fs::read_to_string(rep.join("eval.csv")).unwrap().lines().count(), 3);

    ok(&[&["sweep", "--kind", "decode-steps", "--steps", "1,8,64", "--ckpt", s(&cn), "--data", s(&data), "--out", s(&rep)][..], &fast].concat());
    let csv = fs::read_to_string(rep.join("decode_steps.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(csv.starts_with("# toy-frechet"));
    assert!(rep.join("decode_steps.jsonl").exists());
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    let data = p("data");
    ok(&["gen-data", "--n", "6", "--val", "2", "--out", s(&data)]);
    let common = ["--data", s(&data), "--batch", "2", "--steps", "4"];
    ok(&[&["pretrain", "--out", s(&p("straight.bin"))][..], &common].concat());
    ok(&[&["pretrain", "--out", s(&p("half.bin")), "--stop-after", "2"][..], &common].concat());
    ok(&["pretrain", "--data", s(&data), "--resume", s(&p("half.bin")), "--out", s(&p("done.bin"))]);
    assert_eq!(fs::read(p("straight.bin")).unwrap(), fs::read(p("done.bin")).unwrap());
}
