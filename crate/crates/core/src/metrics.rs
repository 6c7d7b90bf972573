//! Evaluation metrics: SSIM, landmark distances, sync confidence, motion
//! statistics, and factor-space errors.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sync::{audio_segment, stack_rows, video_window, SyncEncoders};
use crate::tensor::Tensor;
use crate::world::FactorState;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Eye openness below which a blink starts.
pub const BLINK_CLOSE: f64 = 0.3;
/// Eye openness above which a closed eye counts as reopened.
pub const BLINK_OPEN: f64 = 0.5;
/// Offsets swept by [`lse_c`].
pub const LSE_MAX_OFFSET: usize = 7;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two `[h x w]` single-channel images over all valid window
/// positions.
pub fn ssim_channel(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let wt = g[u] * g[v];
                    let a = x[(i + u) * w + j + v];
                    let b = y[(i + u) * w + j + v];
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    total / (oh * ow) as f64
}

/// SSIM of frame sequences `[T x 3*size*size]`, averaged over frames and
/// channels. Pixels are expected in `[0, 1]`.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, size: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.cols != 3 * size * size || size < SSIM_WINDOW {
        return Err(Error::Shape(format!("frames must be 3x{size}x{size}, at least {SSIM_WINDOW} wide")));
    }
    if a.rows == 0 {
        return Err(Error::Shape("ssim of empty sequences".into()));
    }
    let plane = size * size;
    let mut total = 0.0;
    for t in 0..a.rows {
        for c in 0..3 {
            let x: Vec<f64> = a.row(t)[c * plane..(c + 1) * plane].iter().map(|v| v.f64()).collect();
            let y: Vec<f64> = b.row(t)[c * plane..(c + 1) * plane].iter().map(|v| v.f64()).collect();
            total += ssim_channel(&x, &y, size, size);
        }
    }
    Ok(total / (3 * a.rows) as f64)
}

/// Mean Euclidean distance over frames and the selected landmarks of
/// `[T x 2K]` interleaved (x, y) tracks.
pub fn lmd<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    points: std::ops::Range<usize>,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "landmark tracks differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if points.end * 2 > pred.cols || points.is_empty() || pred.rows == 0 {
        return Err(Error::Shape("landmark selection out of range".into()));
    }
    let mut total = 0.0;
    for t in 0..pred.rows {
        for k in points.clone() {
            let dx = pred.get(t, 2 * k).f64() - gt.get(t, 2 * k).f64();
            let dy = pred.get(t, 2 * k + 1).f64() - gt.get(t, 2 * k + 1).f64();
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(total / (pred.rows * points.len()) as f64)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Offset-sweep sync confidence. For each window center the cosine
/// similarity to the aligned audio segment minus the median similarity over
/// offsets `-7..=7`, averaged over centers and divided by the temperature.
/// Uses the centers for which every offset fits; shorter clips fall back to
/// whichever offsets fit.
pub fn lse_c<S: Scalar>(enc: &SyncEncoders<S>, frames: &Tensor<S>, audio: &Tensor<S>) -> Result<f64> {
    let half = enc.dims.half_window;
    let w = 2 * half + 1;
    let n = frames.rows.min(audio.rows);
    if n < w {
        return Err(Error::Precondition(format!(
            "sync confidence needs at least {w} frames, got {n}"
        )));
    }
    let first = half;
    let last = n - 1 - half;
    let mo = LSE_MAX_OFFSET;
    let full: Vec<usize> = (first + mo..=last.saturating_sub(mo)).filter(|c| c + mo <= last).collect();
    let centers: Vec<usize> = if full.is_empty() { (first..=last).collect() } else { full };

    let all: Vec<usize> = (first..=last).collect();
    let mut vw = Vec::with_capacity(all.len());
    let mut aw = Vec::with_capacity(all.len());
    for &c in &all {
        vw.push(video_window(frames, c, half)?);
        aw.push(audio_segment(audio, c, half)?);
    }
    let (ve, ae) = enc.embed_pair(&stack_rows(&vw), &stack_rows(&aw))?;
    let sims = ve.matmul(&ae.transpose());
    let tau = enc.tau().f64();
    let mut total = 0.0;
    for &c in &centers {
        let i = c - first;
        let mut row = Vec::with_capacity(2 * mo + 1);
        for o in -(mo as isize)..=mo as isize {
            let j = c as isize + o;
            if j < first as isize || j > last as isize {
                continue;
            }
            row.push(sims.get(i, j as usize - first).f64());
        }
        let aligned = sims.get(i, i).f64();
        total += aligned - median(&mut row);
    }
    Ok(total / centers.len() as f64 / tau)
}

/// Blink rate in events per second and mean per-axis pose variance.
pub fn motion_stats<S: Scalar>(factors: &[FactorState<S>], fps: f64) -> (f64, f64) {
    if factors.is_empty() {
        return (0.0, 0.0);
    }
    let mut blinks = 0usize;
    let mut closed = false;
    for f in factors {
        let e = f.eye.f64();
        if !closed && e < BLINK_CLOSE {
            closed = true;
            blinks += 1;
        } else if closed && e > BLINK_OPEN {
            closed = false;
        }
    }
    let n = factors.len() as f64;
    let mut var = 0.0;
    for axis in 0..3 {
        let mean = factors.iter().map(|f| f.pose[axis].f64()).sum::<f64>() / n;
        var += factors
            .iter()
            .map(|f| (f.pose[axis].f64() - mean).powi(2))
            .sum::<f64>()
            / n;
    }
    (blinks as f64 * fps / n, var / 3.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Root-mean-square error per factor dimension (`[identity | pose | eye | lip]`).
pub fn factor_rmse<S: Scalar>(pred: &[FactorState<S>], gt: &[FactorState<S>]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape("factor sequences differ in length".into()));
    }
    let d = pred[0].to_vec().len();
    let mut acc = vec![0.0; d];
    for (p, g) in pred.iter().zip(gt) {
        for (i, (a, b)) in p.to_vec().iter().zip(g.to_vec()).enumerate() {
            acc[i] += (a.f64() - b.f64()).powi(2);
        }
    }
    Ok(acc.into_iter().map(|s| (s / pred.len() as f64).sqrt()).collect())
}

/// RMS distance between each frame's identity factor and `reference`,
/// over frames and identity dimensions.
pub fn identity_error<S: Scalar>(factors: &[FactorState<S>], reference: &[S]) -> f64 {
    if factors.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for f in factors {
        for (a, b) in f.identity.iter().zip(reference) {
            s += (a.f64() - b.f64()).powi(2);
        }
    }
    (s / (factors.len() * reference.len().max(1)) as f64).sqrt()
}

/// Headline numbers of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ssim: f64,
    pub lmd: f64,
    pub lmd_m: f64,
    pub lse_c: f64,
    pub blink_rate: f64,
    pub pose_variance: f64,
    pub identity_error: f64,
}

impl EvalReport {
    pub const FIELDS: [&'static str; 7] = [
        "ssim",
        "lmd",
        "lmd_m",
        "lse_c",
        "blink_rate",
        "pose_variance",
        "identity_error",
    ];

    fn values(&self) -> [f64; 7] {
        [
            self.ssim,
            self.lmd,
            self.lmd_m,
            self.lse_c,
            self.blink_rate,
            self.pose_variance,
            self.identity_error,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::FIELDS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut vals = [f64::NAN; 7];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line {line:?}")))?;
            let i = Self::FIELDS
                .iter()
                .position(|f| *f == k.trim())
                .ok_or_else(|| Error::Format(format!("unknown report key {:?}", k.trim())))?;
            vals[i] = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("report value {v:?}")))?;
        }
        if vals.iter().any(|v| v.is_nan()) {
            return Err(Error::Format("report lacks a field".into()));
        }
        Ok(EvalReport {
            ssim: vals[0],
            lmd: vals[1],
            lmd_m: vals[2],
            lse_c: vals[3],
            blink_rate: vals[4],
            pose_variance: vals[5],
            identity_error: vals[6],
        })
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}
