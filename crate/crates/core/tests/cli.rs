mod common;

use std::fs;
use std::path::Path;

use common::{cli, metrics_match, QUICK};

fn run_in(dir: &Path, sub: &[&str], extra: &[&str]) -> i32 {
    let out = dir.to_str().unwrap();
    let mut args: Vec<&str> = sub.to_vec();
    args.extend_from_slice(&["--out", out]);
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    cli(&args)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["train"], &[]), 0);
    for f in ["manifest.txt", "metrics.csv", "checkpoint.bin", "report.txt"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let metrics = read(dir.path(), "metrics.csv");
    assert_eq!(metrics.lines().next(), Some("arrangement,mode,top1"));
    assert_eq!(metrics.lines().count(), 2);
    let manifest = read(dir.path(), "manifest.txt");
    assert!(manifest.contains("subcommand = \"train\""));
    assert!(manifest.contains("[config]"));
}

#[test]
fn deepall_train_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_in(dir.path(), &["train"], &["--set", "loss.toggles=\"none\""]);
    assert_eq!(code, 0);
    assert!(read(dir.path(), "manifest.txt").contains("loss.toggles = \"none\""));
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["train"], &["--set", "loss.nonsense=1"]), 2);
    assert_eq!(run_in(dir.path(), &["train"], &["--set", "loss.toggles=\"CL+DL\""]), 2);
    assert_eq!(run_in(dir.path(), &["eval"], &["--missing", "smell", "--checkpoint", "x.bin"]), 2);
    assert_eq!(cli(&["train", "--bogus-flag"]), 2);
}

#[test]
fn missing_checkpoint_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.bin");
    let code = run_in(dir.path(), &["eval"], &["--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 4);
}

#[test]
fn missing_emits_paired_rows_against_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["train"], &[]), 0);
    let ckpt = dir.path().join("checkpoint.bin");
    let ck = ckpt.to_str().unwrap();
    let zero = dir.path().join("zero");
    let tr = dir.path().join("translate");
    let a = ["--checkpoint", ck, "--missing", "video"];
    assert_eq!(run_in(&zero, &["missing"], &[&a[..], &["--fill", "zero"]].concat()), 0);
    assert_eq!(run_in(&tr, &["missing"], &[&a[..], &["--fill", "translate"]].concat()), 0);
    let z = read(&zero, "metrics.csv");
    let t = read(&tr, "metrics.csv");
    assert!(z.contains("zero-fill:video"));
    assert!(t.contains("translate:video"));
    assert_eq!(z.lines().count(), t.lines().count());

    let both = dir.path().join("both");
    assert_eq!(run_in(&both, &["missing"], &["--checkpoint", ck]), 0);
    let rows = read(&both, "metrics.csv").lines().count() - 1;
    // full plus 6 proper masks times 2 fills, for the single target
    assert_eq!(rows, 1 + 6 * 2);
    assert!(both.join("finetune.txt").exists());
}

#[test]
fn ablate_has_seven_toggle_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["ablate"], &["--set", "protocol.sources=[0, 1]"]), 0);
    let metrics = read(dir.path(), "metrics.csv");
    let means: Vec<&str> = metrics.lines().filter(|l| l.starts_with("mean,")).collect();
    assert_eq!(means.len(), 7);
    for toggles in ["none", "CL", "CL+CT", "CL+FS", "CL+FS+DL", "FS+DL+CT", "CL+FS+DL+CT"] {
        assert!(means.iter().any(|l| l.split(',').nth(1) == Some(toggles)), "{toggles}");
    }
}

#[test]
fn reruns_from_a_manifest_are_identical() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    assert_eq!(run_in(first.path(), &["train"], &["--seed", "3"]), 0);
    let manifest = first.path().join("manifest.txt");
    let code = cli(&["train", "--out", second.path().to_str().unwrap(), "--config", manifest.to_str().unwrap()]);
    assert_eq!(code, 0);
    let a = read(first.path(), "metrics.csv");
    let b = read(second.path(), "metrics.csv");
    metrics_match(&a, &b, 1e-12).unwrap();
    assert_eq!(
        fs::read(first.path().join("checkpoint.bin")).unwrap(),
        fs::read(second.path().join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn infogap_and_dump_data_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["infogap"], &["--random", "3"]), 0);
    let m = read(dir.path(), "metrics.csv");
    assert_eq!(m.lines().count(), 5);
    assert!(read(dir.path(), "report.txt").contains("bound_holds = true"));

    let dump = dir.path().join("dump");
    assert_eq!(run_in(&dump, &["dump-data"], &["--domain", "2", "--n", "35"]), 0);
    let counts: usize = read(&dump, "metrics.csv")
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 35);
}

#[test]
fn retrieval_writes_both_parts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["retrieval"], &["--pair", "video,audio"]), 0);
    let m = read(dir.path(), "metrics.csv");
    assert!(m.contains(",shared,"));
    assert!(m.contains(",specific,"));
    assert_eq!(m.lines().count(), 1 + 4 * 3);
}
