use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfdr")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy(dir: &Path) -> String {
    let corpus = dir.join("toy");
    let o = sfdr(&["gen-synthetic", "--n", "8", "--seed", "7", "--out", corpus.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{o:?}");
    corpus.to_str().unwrap().to_string()
}

fn train(corpus: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--corpus", corpus, "--preset", "desk", "--set", "train.seed=7", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    sfdr(&args)
}

#[test]
fn train_caption_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let o = train(&corpus, &ckpt, &["--set", "train.epochs=3"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let manifest = fs::read_to_string(dir.path().join("m.ckpt.manifest.txt")).unwrap();
    assert!(manifest.contains("status=ok") && manifest.contains("train.epochs=3") && manifest.contains("train.seed=7"));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("ce\t")).count(), 3);

    let caps = dir.path().join("caps.txt");
    let attn = dir.path().join("attn");
    let o = sfdr(&[
        "caption", "--ckpt", ckpt.to_str().unwrap(), "--corpus", &corpus, "--split", "all", "--beam", "2",
        "--out", caps.to_str().unwrap(), "--dump-attention", attn.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let lines = fs::read_to_string(&caps).unwrap();
    assert_eq!(lines.lines().count(), 8);
    assert!(lines.lines().all(|l| l.starts_with("syn") && l.contains('\t')));
    assert_eq!(fs::read_dir(&attn).unwrap().count(), 8);

    let o = sfdr(&["eval", "--captions", caps.to_str().unwrap(), "--references", &format!("{corpus}/references.txt")]);
    assert_eq!(code(&o), 0, "{o:?}");
    let report = text(&o);
    assert!(report.contains("s_m=") && report.contains("cider=") && report.contains("not comparable"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let full = dir.path().join("full.ckpt");
    assert_eq!(code(&train(&corpus, &full, &["--set", "train.epochs=4"])), 0);
    let part = dir.path().join("part.ckpt");
    assert_eq!(code(&train(&corpus, &part, &["--set", "train.epochs=2"])), 0);
    let resumed = dir.path().join("resumed.ckpt");
    let last = dir.path().join("part.ckpt.last");
    let o = train(&corpus, &resumed, &["--set", "train.epochs=4", "--resume", last.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(fs::read(dir.path().join("full.ckpt.last")).unwrap(), fs::read(dir.path().join("resumed.ckpt.last")).unwrap());
}

#[test]
fn divergence_exits_three_with_failed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let out = dir.path().join("m.ckpt");
    let o = train(&corpus, &out, &["--set", "train.lr=1e300", "--set", "train.epochs=5"]);
    assert_eq!(code(&o), 3, "{o:?}");
    let manifest = fs::read_to_string(dir.path().join("m.ckpt.manifest.txt")).unwrap();
    assert!(manifest.contains("status=failed") && manifest.contains("batch"));
}

#[test]
fn exit_codes_for_usage_and_data_errors() {
    assert_eq!(code(&sfdr(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&sfdr(&["frobnicate"])), 1);
    assert_eq!(code(&sfdr(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(code(&sfdr(&["train", "--corpus", missing.to_str().unwrap(), "--out", "x"])), 2);
    let corpus = toy(dir.path());
    assert_eq!(code(&sfdr(&["train", "--corpus", &corpus, "--set", "train.lr=-1", "--out", "x"])), 1);
    let junk = dir.path().join("junk.sfdr");
    fs::write(&junk, b"not a bundle").unwrap();
    assert_eq!(code(&sfdr(&["inspect", "--bundle", junk.to_str().unwrap()])), 2);
}

#[test]
fn inspect_reports_header_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy(dir.path());
    let o = sfdr(&["inspect", "--bundle", &format!("{corpus}/syn00003.sfdr")]);
    assert_eq!(code(&o), 0, "{o:?}");
    let out = text(&o);
    for line in ["d_v=32", "H=16", "k=9", "d_r=64", "captions=1"] {
        assert!(out.contains(line), "{out}");
    }
}

#[test]
fn selftest_passes_with_thread_cap() {
    let o = Command::new(env!("CARGO_BIN_EXE_sfdr")).arg("selftest").env("SFDR_THREADS", "1").output().unwrap();
    assert_eq!(code(&o), 0, "{o:?}");
    let out = text(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!out.contains("FAIL"));
}
