//! Held-out evaluation suites: reconstruction, cross-source disentanglement
//! and audio-driven motion statistics.

use std::fmt::Write as _;

use crate::dataset::derive_seed;
use crate::error::{Error, Result};
use crate::inference::{
    evaluate, factors_of, generate, lip_correlation, pose_correlation, pose_lip_leakage, EvalTarget,
    GenerationRequest, Mode,
};
use crate::metrics::{factor_rmse, identity_error, motion_stats, EvalReport};
use crate::model::TalkerModel;
use crate::scalar::Scalar;
use crate::sync::SyncEncoders;
use crate::world::{SyntheticClip, WorldParams};

const STREAM_EVAL: u64 = 0xe7a1;

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_report(rs: &[EvalReport]) -> EvalReport {
    let f = |k: fn(&EvalReport) -> f64| mean(&rs.iter().map(k).collect::<Vec<_>>());
    EvalReport {
        ssim: f(|r| r.ssim),
        lmd: f(|r| r.lmd),
        lmd_m: f(|r| r.lmd_m),
        lse_c: f(|r| r.lse_c),
        blink_rate: f(|r| r.blink_rate),
        pose_variance: f(|r| r.pose_variance),
        identity_error: f(|r| r.identity_error),
    }
}

/// Motion-controllable generation with each clip as its own reference,
/// motion source and audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// RMSE per factor dimension, pooled over clips.
    pub factor_rmse: Vec<f64>,
    pub report: EvalReport,
}

pub fn reconstruction<S: Scalar>(
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    sync: &SyncEncoders<S>,
    clips: &[SyntheticClip<S>],
    seed: u64,
    posterior_mean: bool,
) -> Result<Reconstruction> {
    if clips.is_empty() {
        return Err(Error::Precondition("no evaluation clips".into()));
    }
    let mut sq = Vec::new();
    let mut reports = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        let req = GenerationRequest {
            reference: c.styles.frames[0].clone(),
            audio: c.audio_raw.clone(),
            mode: Mode::MotionControllable,
            motion_source: Some(c.styles.clone()),
            seed: derive_seed(seed, STREAM_EVAL, i as u64),
            posterior_mean,
        };
        let g = generate(model, world, &req)?;
        let f = factors_of(world, &g.codes)?;
        let r = factor_rmse(&f, &c.factors)?;
        if sq.is_empty() {
            sq = vec![0.0; r.len()];
        }
        for (a, v) in sq.iter_mut().zip(&r) {
            *a += v * v;
        }
        let target = EvalTarget {
            frames: &c.frames,
            landmarks: &c.landmarks,
            identity: &c.factors[0].identity,
        };
        reports.push(evaluate(world, sync, &g, &c.audio_raw, &target)?);
    }
    Ok(Reconstruction {
        factor_rmse: sq.into_iter().map(|s| (s / clips.len() as f64).sqrt()).collect(),
        report: mean_report(&reports),
    })
}

/// Reference identity from clip B, motion source from A, audio from C.
#[derive(Clone, Debug, PartialEq)]
pub struct Disentanglement {
    pub identity_error: f64,
    pub pose_corr_source: f64,
    pub pose_corr_audio_clip: f64,
    pub lip_corr_audio: f64,
}

pub fn disentanglement<S: Scalar>(
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    clips: &[SyntheticClip<S>],
    seed: u64,
    posterior_mean: bool,
) -> Result<Disentanglement> {
    let n = clips.len();
    if n < 3 {
        return Err(Error::Precondition("disentanglement needs at least three clips".into()));
    }
    let (mut id, mut pa, mut pc, mut lc) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let (a, b, c) = (&clips[i], &clips[(i + 1) % n], &clips[(i + 2) % n]);
        let t = a.len().min(c.len());
        let req = GenerationRequest {
            reference: b.styles.frames[0].clone(),
            audio: c.audio_raw.slice_rows(0, t),
            mode: Mode::MotionControllable,
            motion_source: Some(a.styles.truncated(t)),
            seed: derive_seed(seed, STREAM_EVAL, i as u64),
            posterior_mean,
        };
        let g = generate(model, world, &req)?;
        let f = factors_of(world, &g.codes)?;
        id.push(identity_error(&f, &b.factors[0].identity));
        pa.push(pose_correlation(&f, &a.factors[..t]));
        pc.push(pose_correlation(&f, &c.factors[..t]));
        lc.push(lip_correlation(&f, &world.lip_from_audio(&req.audio)));
    }
    Ok(Disentanglement {
        identity_error: mean(&id),
        pose_corr_source: mean(&pa),
        pose_corr_audio_clip: mean(&pc),
        lip_corr_audio: mean(&lc),
    })
}

/// Statistics of audio-driven generations, next to the same statistics on
/// the ground-truth clips.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioDriven {
    pub report: EvalReport,
    pub leakage: f64,
    pub lip_corr_audio: f64,
    pub data_blink_rate: f64,
    pub data_pose_variance: f64,
    pub data_lse_c: f64,
}

impl AudioDriven {
    pub fn csv_header() -> String {
        format!("{},leakage,lip_corr_audio,data_blink_rate,data_pose_variance,data_lse_c", EvalReport::csv_header())
    }

    pub fn csv_row(&self) -> String {
        let mut s = self.report.csv_row();
        let _ = write!(
            s,
            ",{},{},{},{},{}",
            self.leakage, self.lip_corr_audio, self.data_blink_rate, self.data_pose_variance, self.data_lse_c
        );
        s
    }
}

/// `samples` draws per clip, each clip using its own first frame as the
/// reference and its own audio.
pub fn audio_driven<S: Scalar>(
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    sync: &SyncEncoders<S>,
    clips: &[SyntheticClip<S>],
    seed: u64,
    samples: usize,
) -> Result<AudioDriven> {
    if clips.is_empty() || samples == 0 {
        return Err(Error::Precondition("no evaluation clips".into()));
    }
    let mut reports = Vec::new();
    let (mut leak, mut lips) = (vec![], vec![]);
    let (mut d_blink, mut d_pose, mut d_lse) = (vec![], vec![], vec![]);
    for (i, c) in clips.iter().enumerate() {
        let lip = world.lip_from_audio(&c.audio_raw);
        let target = EvalTarget {
            frames: &c.frames,
            landmarks: &c.landmarks,
            identity: &c.factors[0].identity,
        };
        for s in 0..samples {
            let req = GenerationRequest {
                reference: c.styles.frames[0].clone(),
                audio: c.audio_raw.clone(),
                mode: Mode::AudioDriven,
                motion_source: None,
                seed: derive_seed(seed, STREAM_EVAL, (i * samples + s) as u64),
                posterior_mean: false,
            };
            let g = generate(model, world, &req)?;
            let f = factors_of(world, &g.codes)?;
            leak.push(pose_lip_leakage(&f, &lip));
            lips.push(lip_correlation(&f, &lip));
            reports.push(evaluate(world, sync, &g, &c.audio_raw, &target)?);
        }
        let (b, p) = motion_stats(&c.factors, world.dims.fps);
        d_blink.push(b);
        d_pose.push(p);
        d_lse.push(crate::metrics::lse_c(sync, &c.frames, &c.audio_raw)?);
    }
    Ok(AudioDriven {
        report: mean_report(&reports),
        leakage: mean(&leak),
        lip_corr_audio: mean(&lips),
        data_blink_rate: mean(&d_blink),
        data_pose_variance: mean(&d_pose),
        data_lse_c: mean(&d_lse),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::run_tests::{tiny_cfg, tiny_state};

    #[test]
    fn suites_run_and_are_deterministic() {
        let cfg = tiny_cfg();
        let (st, clips) = tiny_state(&cfg);
        let sync = st.sync.clone().unwrap();
        let r = reconstruction(&st.model, &st.world, &sync, &clips, 1, false).unwrap();
        assert_eq!(r, reconstruction(&st.model, &st.world, &sync, &clips, 1, false).unwrap());
        assert_eq!(r.factor_rmse.len(), st.world.dims.n_factors());
        assert!(r.report.is_finite());
        let d = disentanglement(&st.model, &st.world, &clips, 1, true).unwrap();
        assert!(d.identity_error.is_finite());
        assert!(disentanglement(&st.model, &st.world, &clips[..2], 1, true).is_err());
        let a = audio_driven(&st.model, &st.world, &sync, &clips[..2], 1, 2).unwrap();
        assert!(a.report.is_finite() && a.leakage >= 0.0);
        assert_eq!(a.csv_row().split(',').count(), AudioDriven::csv_header().split(',').count());
    }
}
