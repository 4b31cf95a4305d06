use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn datadiv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datadiv"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = datadiv(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = datadiv(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = datadiv(dir.path(), &["experiment", "--dry-run", "--set", "diversify.kk=2"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn dry_run_plans_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ok(dir.path(), &["experiment", "--dry-run", "--set", "seeds=[1,2]", "--set", "diversify.k=2"]);
    assert!(plan.contains("rows 4"), "{plan}");
    assert!(!dir.path().join("report").exists());
}

#[test]
fn file_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-toy", "--set", "n_train=200", "--set", "n_valid=20", "--set", "n_test=20", "--set", "out_dir=\"toy\""]);
    for f in ["train.src", "train.tgt", "valid.src", "test.tgt", "dictionary.json"] {
        assert!(d.join("toy").join(f).exists(), "{f}");
    }
    let bpe = ok(d, &["learn-bpe", "--set", "train_source=\"toy/train.src\"", "--set", "train_target=\"toy/train.tgt\"", "--set", "merges=50"]);
    assert!(bpe.starts_with("merges "), "{bpe}");
    ok(d, &["apply-bpe", "--set", "bpe=\"bpe.codes\"", "--set", "input=\"toy/test.src\"", "--set", "output=\"test.bpe\""]);
    ok(d, &["apply-bpe", "--set", "bpe=\"bpe.codes\"", "--set", "input=\"test.bpe\"", "--set", "output=\"test.back\"", "--set", "decode=true"]);
    assert_eq!(fs::read_to_string(d.join("test.back")).unwrap(), fs::read_to_string(d.join("toy/test.src")).unwrap());

    let log = ok(
        d,
        &[
            "train",
            "--set", "train_source=\"toy/train.src\"",
            "--set", "train_target=\"toy/train.tgt\"",
            "--set", "valid_source=\"toy/valid.src\"",
            "--set", "valid_target=\"toy/valid.tgt\"",
            "--set", "bpe=\"bpe.codes\"",
            "--set", "vocab=\"vocab.txt\"",
            "--set", "model.d_model=8",
            "--set", "model.d_ffn=16",
            "--set", "model.n_layers=1",
            "--set", "train.steps=20",
            "--set", "train.eval_interval=10",
            "--set", "train.batch_tokens=200",
        ],
    );
    assert!(log.contains("step 20"), "{log}");
    ok(d, &["translate", "--set", "checkpoints=[\"model.ckpt\"]", "--set", "bpe=\"bpe.codes\"", "--set", "input=\"toy/test.src\"", "--set", "output=\"hyp.txt\""]);
    let lines = fs::read_to_string(d.join("hyp.txt")).unwrap();
    assert_eq!(lines.lines().count(), 20);
    let eval = ok(d, &["evaluate", "--set", "hypotheses=[\"hyp.txt\",\"toy/test.tgt\"]", "--set", "reference=\"toy/test.tgt\""]);
    assert!(eval.contains("BLEU 100.0000"), "{eval}");
    assert!(eval.contains("pairwise_bleu"), "{eval}");
}
