//! Acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-3 and 9 are exact engineering contracts and fail the test when
//! violated. Criteria 4-8 are experimental outcomes on the synthetic world:
//! they are reported but never panic. Trained models are cached under the
//! test scratch directory, keyed by the crate sources and the run settings,
//! so a rerun without code changes skips training.

mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use latent_talker::config::ModelConfig;
use latent_talker::dataset::synthesize_range;
use latent_talker::evaluation::{audio_driven, disentanglement, reconstruction, AudioDriven};
use latent_talker::gradcheck;
use latent_talker::metrics::lse_c;
use latent_talker::model::TalkerModel;
use latent_talker::oracles::{density_mass_2d, flow_sweep, kl_calibration};
use latent_talker::sync::{pretrain_sync, retrieval_accuracy, SyncEncoders};
use latent_talker::tensor_io::Archive;
use latent_talker::training::TrainState;
use latent_talker::world::{SyntheticClip, WorldParams};
use sha2::{Digest, Sha256};

const DATA_SEED: u64 = 7;
const SYNC_SEED: u64 = 11;
const TRAIN_SEED: u64 = 3;
const EVAL_SEED: u64 = 1;
const TRAIN_CLIPS: usize = 200;
const HELD_CLIPS: usize = 40;
const FRAMES: usize = 64;
const SAMPLES: usize = 4;

/// Writes straight to the process stdout so lines survive output capture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Hash of every source file of the crate, so cached models go stale when
/// the code changes.
fn source_hash() -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
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
        h.update(f.strip_prefix(&root).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

struct Cache {
    dir: PathBuf,
}

impl Cache {
    fn new(cfg: &ModelConfig) -> Self {
        let mut h = Sha256::new();
        h.update(source_hash());
        h.update(cfg.to_kv_string());
        h.update(format!("{DATA_SEED} {SYNC_SEED} {TRAIN_SEED} {TRAIN_CLIPS} {FRAMES}"));
        let key = hex::encode(h.finalize());
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&key[..16]);
        fs::create_dir_all(&dir).unwrap();
        Cache { dir }
    }

    fn seconds(&self, name: &str) -> Option<f64> {
        fs::read_to_string(self.dir.join(format!("{name}.secs"))).ok()?.trim().parse().ok()
    }

    fn sync(&self, cfg: &ModelConfig, train: &[SyntheticClip<f32>]) -> (SyncEncoders<f32>, f64) {
        let path = self.dir.join("sync.bin");
        if let (Ok(s), Some(t)) = (SyncEncoders::<f32>::load(&path, cfg), self.seconds("sync")) {
            let mut s = s;
            s.freeze();
            return (s, t);
        }
        let t0 = Instant::now();
        let mut enc = pretrain_sync(train, cfg, SYNC_SEED).unwrap().encoders;
        enc.freeze();
        let t = t0.elapsed().as_secs_f64();
        enc.save(&path, cfg).unwrap();
        fs::write(self.dir.join("sync.secs"), t.to_string()).unwrap();
        (enc, t)
    }

    fn model(
        &self,
        name: &str,
        cfg: &ModelConfig,
        world: &WorldParams<f64>,
        train: &[SyntheticClip<f32>],
        sync: &SyncEncoders<f32>,
    ) -> (TalkerModel<f32>, f64) {
        let path = self.dir.join(format!("{name}.bin"));
        if let (Ok(a), Some(t)) = (Archive::<f32>::load(&path), self.seconds(name)) {
            if let Ok(m) = TalkerModel::from_archive(&a, cfg) {
                return (m, t);
            }
        }
        let t0 = Instant::now();
        let enc = cfg.use_sync_loss.then(|| sync.clone());
        let mut st = TrainState::<f32>::new(cfg, world, enc, TRAIN_SEED).unwrap();
        st.train(train, cfg.train_steps as u64, &mut std::io::sink(), None).unwrap();
        let t = t0.elapsed().as_secs_f64();
        st.model.to_archive().save(&path).unwrap();
        fs::write(self.dir.join(format!("{name}.secs")), t.to_string()).unwrap();
        (st.model, t)
    }
}

fn criterion_1() -> bool {
    let t0 = Instant::now();
    let s = flow_sweep(1000, 101);
    let mass = density_mass_2d(102);
    let el = t0.elapsed();
    let ok = s.max_round_trip <= 1e-5 && s.max_log_det <= 1e-6 && (mass - 1.0).abs() <= 0.02 && el.as_secs() < 120;
    say(&format!(
        "criterion 1 (flow correctness): {} round trip max {:.2e} (<= 1e-5) over {} pairs, |log det| max {:.2e} (<= 1e-6), 2-D mass {:.4} (1 +- 0.02), {} (< 120s)",
        verdict(ok),
        s.max_round_trip,
        s.trials,
        s.max_log_det,
        mass,
        secs(el)
    ));
    ok
}

fn criterion_2() -> bool {
    let t0 = Instant::now();
    let (m0, se0) = kl_calibration(0.0, 0.0, 10_000, 201);
    let (m1, se1) = kl_calibration(0.0, 1.0, 10_000, 202);
    let el = t0.elapsed();
    let ok = m0.abs() <= 3.0 * se0 + 1e-12 && (m1 - 0.5).abs() <= 3.0 * se1 && el.as_secs() < 60;
    say(&format!(
        "criterion 2 (KL estimator calibration): {} matching Gaussians {:.4} +- {:.4} (0 within 3 SE), shifted base {:.4} +- {:.4} (0.5 within 3 SE), {} (< 60s)",
        verdict(ok),
        m0,
        se0,
        m1,
        se1,
        secs(el)
    ));
    ok
}

fn criterion_3() -> bool {
    let t0 = Instant::now();
    let results = gradcheck::suite(4).unwrap();
    let el = t0.elapsed();
    let worst = results.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let ok = results.iter().all(|(_, r)| r.passes(1e-3)) && el.as_secs() < 300;
    let parts: Vec<String> = results.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err)).collect();
    say(&format!(
        "criterion 3 (gradient suite): {} worst rel err {:.2e} (<= 1e-3) [{}], {} (< 300s)",
        verdict(ok),
        worst,
        parts.join(", "),
        secs(el)
    ));
    ok
}

fn criterion_4(sync: &SyncEncoders<f32>, held: &[SyntheticClip<f32>], train_secs: f64) -> bool {
    let acc = retrieval_accuracy(sync, held, 32, 50, EVAL_SEED).unwrap();
    let shift = 8;
    let mut wins = 0;
    for c in held {
        let n = c.len() - shift;
        let aligned = lse_c(sync, &c.frames, &c.audio_raw).unwrap();
        let shifted = lse_c(sync, &c.frames.slice_rows(0, n), &c.audio_raw.slice_rows(shift, n)).unwrap();
        wins += usize::from(aligned > shifted);
    }
    let frac = wins as f64 / held.len() as f64;
    let ok = acc >= 0.90 && frac >= 0.90 && train_secs < 900.0;
    say(&format!(
        "criterion 4 (sync pretraining): {} top-1 retrieval among 32 {:.3} (>= 0.90), in-sync beats shift-8 on {:.3} of clips (>= 0.90), pretraining {:.0}s (< 900s)",
        verdict(ok),
        acc,
        frac,
        train_secs
    ));
    ok
}

fn criterion_5(
    model: &TalkerModel<f32>,
    world: &WorldParams<f32>,
    sync: &SyncEncoders<f32>,
    held: &[SyntheticClip<f32>],
    train_secs: f64,
) -> bool {
    let r = reconstruction(model, world, sync, held, EVAL_SEED, false).unwrap();
    let worst = r.factor_rmse.iter().cloned().fold(0.0, f64::max);
    let rep = &r.report;
    let ok = worst <= 0.15
        && rep.ssim >= 0.85
        && rep.lmd_m <= 0.5
        && rep.identity_error <= 0.05
        && train_secs < 1800.0;
    say(&format!(
        "criterion 5 (reconstruction): {} worst factor RMSE {:.4} (<= 0.15), SSIM {:.4} (>= 0.85), LMD_m {:.4} (<= 0.5), identity error {:.4} (<= 0.05), training {:.0}s (< 1800s)",
        verdict(ok),
        worst,
        rep.ssim,
        rep.lmd_m,
        rep.identity_error,
        train_secs
    ));
    ok
}

fn criterion_6(model: &TalkerModel<f32>, world: &WorldParams<f32>, held: &[SyntheticClip<f32>]) -> bool {
    let d = disentanglement(model, world, held, EVAL_SEED, false).unwrap();
    let ok = d.identity_error <= 0.05
        && d.pose_corr_source >= 0.8
        && d.pose_corr_audio_clip <= 0.3
        && d.lip_corr_audio >= 0.8;
    say(&format!(
        "criterion 6 (disentanglement): {} identity error vs B {:.4} (<= 0.05), pose corr with A {:.3} (>= 0.8), pose corr with C {:.3} (<= 0.3), lip corr with C's audio {:.3} (>= 0.8)",
        verdict(ok),
        d.identity_error,
        d.pose_corr_source,
        d.pose_corr_audio_clip,
        d.lip_corr_audio
    ));
    ok
}

fn criterion_7(full: &AudioDriven, no_flow: &AudioDriven) -> bool {
    let r = &full.report;
    let ratio = r.pose_variance / full.data_pose_variance;
    let ok = (0.1..=0.6).contains(&r.blink_rate)
        && (0.5..=2.0).contains(&ratio)
        && no_flow.report.blink_rate < r.blink_rate
        && no_flow.leakage > full.leakage;
    say(&format!(
        "criterion 7 (audio-driven realism): {} blink rate {:.3}/s (in [0.1, 0.6]; data {:.3}), pose variance ratio {:.3} (in [0.5, 2]), no-flow blink rate {:.3} (< {:.3}), no-flow leakage {:.4} (> {:.4})",
        verdict(ok),
        r.blink_rate,
        full.data_blink_rate,
        ratio,
        no_flow.report.blink_rate,
        r.blink_rate,
        no_flow.leakage,
        full.leakage
    ));
    ok
}

fn criterion_8(full: &AudioDriven, no_sync: &AudioDriven) -> bool {
    let ok = no_sync.report.lse_c < full.report.lse_c;
    say(&format!(
        "criterion 8 (sync-loss ablation): {} LSE-C without sync loss {:.3} (< full {:.3}; data {:.3})",
        verdict(ok),
        no_sync.report.lse_c,
        full.report.lse_c,
        full.data_lse_c
    ));
    ok
}

fn criterion_9() -> bool {
    let t0 = Instant::now();
    let f = common::Fixture::new();
    f.pipeline("a");
    f.pipeline("b");
    let bad = common::differing_steps(&f);
    let ok = bad.is_empty();
    say(&format!(
        "criterion 9 (determinism): {} {} subcommand runs compared byte for byte, differing: [{}], {}",
        verdict(ok),
        common::PIPELINE_STEPS.len(),
        bad.join(", "),
        secs(t0.elapsed())
    ));
    ok
}

#[test]
fn acceptance() {
    say("");
    let mut hard = Vec::new();
    hard.push(("1", criterion_1()));
    hard.push(("2", criterion_2()));
    hard.push(("3", criterion_3()));

    let cfg = ModelConfig::default();
    let cache = Cache::new(&cfg);
    let train = synthesize_range(&cfg, 0..TRAIN_CLIPS, FRAMES, DATA_SEED, 1).unwrap();
    let held = synthesize_range(&cfg, TRAIN_CLIPS..TRAIN_CLIPS + HELD_CLIPS, FRAMES, DATA_SEED, 1).unwrap();
    assert_eq!(train.world, held.world);
    let world = train.world.clone();
    let world32 = world.cast::<f32>();

    let (sync, sync_secs) = cache.sync(&cfg, &train.clips);
    let mut research = vec![("4", criterion_4(&sync, &held.clips, sync_secs))];

    let (full, full_secs) = cache.model("full", &cfg, &world, &train.clips, &sync);
    research.push(("5", criterion_5(&full, &world32, &sync, &held.clips, full_secs)));
    research.push(("6", criterion_6(&full, &world32, &held.clips)));

    let no_flow_cfg = ModelConfig {
        flow_steps: 0,
        ..cfg.clone()
    };
    let no_sync_cfg = ModelConfig {
        use_sync_loss: false,
        ..cfg.clone()
    };
    let (no_flow, _) = cache.model("no_flow", &no_flow_cfg, &world, &train.clips, &sync);
    let (no_sync, _) = cache.model("no_sync", &no_sync_cfg, &world, &train.clips, &sync);
    let ad = |m: &TalkerModel<f32>| audio_driven(m, &world32, &sync, &held.clips, EVAL_SEED, SAMPLES).unwrap();
    let (a_full, a_no_flow, a_no_sync) = (ad(&full), ad(&no_flow), ad(&no_sync));
    research.push(("7", criterion_7(&a_full, &a_no_flow)));
    research.push(("8", criterion_8(&a_full, &a_no_sync)));

    hard.push(("9", criterion_9()));

    let passed = hard.iter().chain(&research).filter(|(_, ok)| *ok).count();
    say(&format!("acceptance: {passed}/9 criteria pass"));
    let failed: Vec<&str> = hard.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "contract criteria failed: {failed:?}");
}
