//! Shared fixture: the command-line tool driven on a tiny configuration.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = "\
style_layers = 4
edit_layers = 2
style_dim = 8
identity_dim = 3
lip_dim = 2
distractor_channels = 2
motion_dim = 4
audio_dim = 3
seq_len = 12
window = 6
sync_half_window = 1
posterior_stem = 5
posterior_stem_out = 4
posterior_audio = 3
posterior_hidden = 5
prior_hidden = 5
prior_audio = 3
flow_steps = 2
flow_hidden = 4
control_channels = 7
audio_hidden = 5
sync_embed = 4
sync_hidden = 6
sync_conv_channels = 2
perceptual_channels = 2
sync_batch = 4
sync_steps = 6
batch_size = 2
train_steps = 4
";

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latent-talker"));
    c.env_remove("LATENT_TALKER_SEED");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub struct Fixture {
    _tmp: tempfile::TempDir,
    pub root: PathBuf,
    pub cfg: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let cfg = root.join("tiny.conf");
        fs::write(&cfg, TINY).unwrap();
        Fixture { _tmp: tmp, root, cfg }
    }

    pub fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Run the whole pipeline into `<tag>-*` directories.
    pub fn pipeline(&self, tag: &str) {
        let c = s(&self.cfg);
        let d = |n: &str| self.p(&format!("{tag}-{n}"));
        ok(&["--config", c, "--seed", "5", "make-data", "--clips", "5", "--frames", "14", "--out", s(&d("data"))]);
        ok(&[
            "--config", c, "--seed", "5", "make-data", "--clips", "3", "--first", "5", "--frames", "14", "--out",
            s(&d("held")),
        ]);
        ok(&[
            "--seed", "1", "pretrain-sync", "--data", s(&d("data")), "--eval-data", s(&d("held")), "--out",
            s(&d("sync")),
        ]);
        let sync = d("sync").join("sync.bin");
        ok(&[
            "--seed", "2", "train", "--data", s(&d("data")), "--sync", s(&sync), "--checkpoint-every", "2", "--out",
            s(&d("train")),
        ]);
        let model = d("train").join("model.bin");
        let clip = |n: &str| d("held").join(n);
        ok(&[
            "--seed", "3", "generate", "--model", s(&model), "--mode", "audio-driven", "--ref", s(&clip("clip_000")),
            "--audio", s(&clip("clip_001")), "--gt", s(&clip("clip_001")), "--sync", s(&sync), "--out",
            s(&d("gen-audio")),
        ]);
        ok(&[
            "--seed", "3", "generate", "--model", s(&model), "--mode", "motion-controllable", "--ref",
            s(&clip("clip_000")), "--audio", s(&clip("clip_001")), "--motion", s(&clip("clip_002")), "--out",
            s(&d("gen-motion")),
        ]);
        ok(&[
            "--seed", "4", "evaluate", "--model", s(&model), "--data", s(&d("held")), "--sync", s(&sync),
            "--samples", "2", "--out", s(&d("eval")),
        ]);
        for v in ["no-flow", "no-sync"] {
            ok(&[
                "--seed", "2", "ablate", "--variant", v, "--data", s(&d("data")), "--eval-data", s(&d("held")),
                "--sync", s(&sync), "--baseline", s(&model), "--samples", "1", "--out", s(&d(&format!("ablate-{v}"))),
            ]);
        }
    }
}

/// Output directories written by [`Fixture::pipeline`], one per invocation.
pub const PIPELINE_STEPS: [&str; 9] = [
    "data", "held", "sync", "train", "gen-audio", "gen-motion", "eval", "ablate-no-flow", "ablate-no-sync",
];

/// Steps whose outputs differ between the `a` and `b` pipeline runs.
pub fn differing_steps(f: &Fixture) -> Vec<String> {
    let mut bad = Vec::new();
    for step in PIPELINE_STEPS {
        let a = tree(&f.p(&format!("a-{step}")));
        let b = tree(&f.p(&format!("b-{step}")));
        if a.is_empty() || a != b {
            bad.push(step.to_string());
        }
    }
    bad
}
