//! End-to-end runs of the command-line tool on a tiny configuration.

mod common;

use std::fs;
use std::path::Path;

use common::{bin, ok, run, s, tree, Fixture, PIPELINE_STEPS};

#[test]
fn pipeline_outputs_and_bit_identical_reruns() {
    let f = Fixture::new();
    f.pipeline("a");
    f.pipeline("b");
    for step in PIPELINE_STEPS {
        let a = tree(&f.p(&format!("a-{step}")));
        let b = tree(&f.p(&format!("b-{step}")));
        assert!(!a.is_empty(), "{step} wrote nothing");
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "{step} file sets differ");
        for (k, v) in &a {
            assert!(v == &b[k], "{step}/{} differs between runs", k.display());
        }
    }

    let train = f.p("a-train");
    for name in ["metrics.csv", "checkpoint.bin", "model.bin", "run.txt"] {
        assert!(train.join(name).exists(), "missing {name}");
    }
    let metrics = fs::read_to_string(train.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,loss_total,loss_l2,loss_lpips,loss_kl,loss_sync");
    assert_eq!(lines.len(), 1 + 4);

    let run_txt = fs::read_to_string(train.join("run.txt")).unwrap();
    assert!(run_txt.contains("# seed = 2"), "{run_txt}");
    assert!(run_txt.lines().any(|l| l.starts_with("# input_hash = ")));

    let gen = f.p("a-gen-audio");
    assert!(gen.join("frames/frame_00000.png").exists());
    assert!(gen.join("frames/frame_00013.png").exists());
    assert!(gen.join("report.txt").exists());
    assert!(gen.join("codes.bin").exists());

    let cmp = fs::read_to_string(f.p("a-ablate-no-flow/comparison.csv")).unwrap();
    let rows: Vec<&str> = cmp.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("full,") && rows[2].starts_with("no-flow,"));
}

#[test]
fn resume_continues_to_the_same_model() {
    let f = Fixture::new();
    let c = s(&f.cfg);
    let data = f.p("data");
    ok(&["--config", c, "make-data", "--clips", "4", "--frames", "14", "--out", s(&data)]);
    let direct = f.p("direct");
    ok(&["train", "--data", s(&data), "--no-sync-loss", "--out", s(&direct)]);
    let part = f.p("part");
    ok(&["train", "--data", s(&data), "--no-sync-loss", "--steps", "2", "--out", s(&part)]);
    let resumed = f.p("resumed");
    ok(&[
        "train", "--data", s(&data), "--no-sync-loss", "--resume", s(&part.join("checkpoint.bin")), "--out",
        s(&resumed),
    ]);
    assert_eq!(fs::read(direct.join("model.bin")).unwrap(), fs::read(resumed.join("model.bin")).unwrap());
}

#[test]
fn seed_environment_variable_wins_over_flag() {
    let f = Fixture::new();
    let c = s(&f.cfg);
    let (a, b) = (f.p("a"), f.p("b"));
    ok(&["--config", c, "--seed", "9", "make-data", "--clips", "2", "--out", s(&a)]);
    let out = bin()
        .env("LATENT_TALKER_SEED", "9")
        .args(["--config", c, "--seed", "1", "make-data", "--clips", "2", "--out", s(&b)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(tree(&a).get(Path::new("manifest.txt")), tree(&b).get(Path::new("manifest.txt")));
}

#[test]
fn usage_and_runtime_failures_have_distinct_exit_codes() {
    let f = Fixture::new();
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--set", "no_such_key=1", "make-data", "--out", s(&f.p("x"))]).status.code(), Some(1));
    let c = s(&f.cfg);
    let data = f.p("data");
    ok(&["--config", c, "make-data", "--clips", "2", "--out", s(&data)]);
    // The sync loss is on by default and needs a discriminator.
    assert_eq!(run(&["train", "--data", s(&data), "--out", s(&f.p("t"))]).status.code(), Some(1));
    // A missing corpus is a runtime failure.
    assert_eq!(
        run(&["train", "--data", s(&f.p("nope")), "--no-sync-loss", "--out", s(&f.p("t"))]).status.code(),
        Some(2)
    );
    // A corpus from another world is refused.
    ok(&["--config", c, "train", "--data", s(&data), "--no-sync-loss", "--steps", "1", "--out", s(&f.p("m"))]);
    let other = f.p("other");
    ok(&["--config", c, "--seed", "99", "make-data", "--clips", "3", "--out", s(&other)]);
    let code = run(&[
        "evaluate", "--model", s(&f.p("m/model.bin")), "--data", s(&other), "--sync", s(&f.p("none")), "--out",
        s(&f.p("e")),
    ])
    .status
    .code();
    assert_eq!(code, Some(1));
}
