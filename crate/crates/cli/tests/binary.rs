mod common;

use std::path::Path;
use std::process::{Command, Output};

use vpgc_cli::config::OUT_ROOT_ENV;

fn vpgc(root: &Path, args: &[&str], overrides: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vpgc"));
    cmd.env(OUT_ROOT_ENV, root).env("RUST_LOG", "warn").args(args);
    for o in overrides {
        cmd.arg("--set").arg(o);
    }
    cmd.output().unwrap()
}

/// Tiny overrides with relative paths, so outputs land under the root.
fn relative(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = common::tiny_overrides(Path::new("/unused"))
        .into_iter()
        .filter(|o| !o.starts_with("paths."))
        .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn pipeline_under_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = relative(&[]);
    for cmd in ["pretrain", "gen-data", "train", "eval", "dump-attn"] {
        let out = vpgc(root, &[cmd], &o);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "backbone/backbone.ck",
        "data/train.jsonl",
        "data/eval.jsonl",
        "train/completion.ck",
        "train/loss.csv",
        "eval/report.csv",
        "attn/global.ppm",
    ] {
        assert!(root.join(f).exists(), "{f}");
    }
    for d in ["backbone", "data", "train", "eval", "attn"] {
        assert!(root.join(d).join("config.json").exists(), "{d}");
    }

    // The written config alone reproduces the report.
    let report = std::fs::read(root.join("eval/report.csv")).unwrap();
    let cfg = root.join("eval/config.json");
    let out = vpgc(root, &["eval", "--config", cfg.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(root.join("eval/report.csv")).unwrap(), report);

    let out = vpgc(root, &["gen-data"], &o);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train: pairs=10"), "{text}");
    assert!(text.contains("kinds:"), "{text}");
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = vpgc(root, &["train"], &relative(&[]));
    assert!(!out.status.success());
    let out = vpgc(root, &["config"], &relative(&["train.no_such_key=1"]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = vpgc(root, &["config"], &relative(&["train.steps=12"]));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"steps\": 12"));
}

#[test]
fn nan_aborts_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = relative(&["train.optimizer.lr_peak=1e308", "train.steps=5"]);
    for cmd in ["pretrain", "gen-data"] {
        assert!(vpgc(root, &[cmd], &o).status.success());
    }
    let out = vpgc(root, &["train"], &o);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
