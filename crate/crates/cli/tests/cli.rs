//! The `dt4rec` binary: exit codes, output locations and a short run.

use std::path::Path;
use std::process::{Command, Output};

fn dt4rec(args: &[&str], out_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dt4rec"));
    cmd.args(args).env("RUST_LOG", "error");
    match out_root {
        Some(p) => cmd.env("DT4REC_OUT", p),
        None => cmd.env_remove("DT4REC_OUT"),
    };
    cmd.output().expect("binary runs")
}

const SMALL: [&str; 8] = [
    "--set",
    "synth.n_users=30",
    "--set",
    "synth.n_days=25",
    "--set",
    "train.epochs=1",
    "--set",
    "model.dim=8",
];

#[test]
fn configuration_errors_exit_with_two() {
    let out = dt4rec(&["train", "--set", "train.epochz=3"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    let out = dt4rec(&["synth", "--ablate", "no_such_thing"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = dt4rec(&["train"], None);
    assert_eq!(out.status.code(), Some(2), "no bundle given");
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = dt4rec(&["train", "--bundle", missing.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn outputs_default_to_the_environment_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "2"];
    args.extend(SMALL);
    let out = dt4rec(&args, Some(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "train.jsonl", "events.tsv", "config.toml"] {
        assert!(dir.path().join("synth").join(f).exists(), "{f}");
    }
}

#[test]
fn foreign_checkpoint_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend(SMALL);
        let out = dt4rec(&args, None);
        assert!(out.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b, ckpt_dir) = (p("a"), p("b"), p("policy"));
    run(&["synth", "-o", &a]);
    run(&["synth", "-o", &b, "--set", "synth.n_items=60"]);
    run(&["train", "--bundle", &a, "-o", &ckpt_dir]);
    let ckpt = format!("{ckpt_dir}/model.ckpt");
    let mut args = vec!["evaluate", "--bundle", b.as_str(), "--checkpoint", ckpt.as_str(), "-o"];
    let eval_dir = p("eval");
    args.push(&eval_dir);
    args.extend(SMALL);
    let out = dt4rec(&args, None);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
