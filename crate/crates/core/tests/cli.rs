use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempcondlm"))
        .args(args)
        .current_dir(dir)
        .env("TEMPCONDLM_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn gen(dir: &Path, out: &str) -> Output {
    run(dir, &["gen-data", "--out", out, "--seed", "7", "--set", "generation.n_clips=100", "--set", "generation.heldout_clips=5"])
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), "a").status.success());
    assert!(gen(dir.path(), "b").status.success());
    for file in ["train.jsonl", "heldout.jsonl", "config"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let train = fs::read_to_string(dir.path().join("a/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 101);
    assert!(fs::read_to_string(dir.path().join("a/config")).unwrap().contains("generation.seed = 7\n"));
    let leftovers: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn malformed_chord_line_fails_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(d, &["gen-data", "--out", "data", "--set", "generation.n_clips=4", "--set", "generation.heldout_clips=1", "--set", "generation.clip_seconds=1"]).status.success());
    let small = ["--set", "steps=1", "--set", "model.dim=8", "--set", "model.mlp_hidden=8"];
    let mut args = vec!["pretrain", "--data", "data", "--out", "pre"];
    args.extend(small);
    assert!(run(d, &args).status.success());
    fs::write(d.join("chords.lab"), "0.0 1.0 C:maj\n# comment\n1.0 2.0 Q:wat\n").unwrap();
    let out = run(d, &["sample", "--ckpt", "pre/ckpt-1", "--chords", "chords.lab", "--out", "s"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(!d.join("s").exists());
}

#[test]
fn bad_settings_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--out", "x", "--set", "generation.no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    fs::write(dir.path().join("bad.cfg"), "generation.n_clips = 3\nnot a pair\n").unwrap();
    let out = run(dir.path(), &["gen-data", "--config", "bad.cfg", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = run(dir.path(), &["finetune", "--base", "missing", "--data", "x", "--out", "y"]);
    assert!(!out.status.success());
}
