//! Contrastive lip-sync discriminator: video and audio towers embedding short
//! windows into a shared unit sphere, trained with a symmetric softmax
//! contrastive loss, then frozen for scoring.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, Conv2d, Linear, LEAKY_SLOPE};
use crate::params::{Adam, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensor_io::Archive;
use crate::world::SyntheticClip;

pub const NORM_EPS: f64 = 1e-8;
pub const LOG_TAU_MIN: f64 = -4.605_170_185_988_091; // ln 0.01
pub const LOG_TAU_MAX: f64 = 0.0;

/// Shape parameters of the two towers.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncDims {
    pub half_window: usize,
    pub image_size: usize,
    pub audio_raw_dim: usize,
    pub channels: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl SyncDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        SyncDims {
            half_window: cfg.sync_half_window,
            image_size: cfg.image_size,
            audio_raw_dim: cfg.audio_raw_dim(),
            channels: cfg.sync_conv_channels,
            hidden: cfg.sync_hidden,
            embed: cfg.sync_embed,
        }
    }

    pub fn window(&self) -> usize {
        2 * self.half_window + 1
    }

    pub fn pixels(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    fn frame_features(&self) -> usize {
        let s = self.image_size / 4;
        self.channels * s * s
    }
}

/// Video tower, audio tower, and temperature.
#[derive(Clone, Debug)]
pub struct SyncEncoders<S> {
    pub dims: SyncDims,
    pub store: ParamStore<S>,
    conv1: Conv2d,
    conv2: Conv2d,
    video_fc1: Linear,
    video_fc2: Linear,
    audio_fc1: Linear,
    audio_fc2: Linear,
    log_tau: ParamId,
}

impl<S: Scalar> SyncEncoders<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let dims = SyncDims::from_config(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = dims.image_size;
        let c = dims.channels;
        let conv1 = Conv2d::new(
            &mut store,
            "video.conv1",
            ConvGeom { in_c: 3, in_h: s, in_w: s, out_c: c, k: 3, stride: 2, pad: 1 },
            &mut rng,
        );
        let conv2 = Conv2d::new(
            &mut store,
            "video.conv2",
            ConvGeom { in_c: c, in_h: s / 2, in_w: s / 2, out_c: c, k: 3, stride: 2, pad: 1 },
            &mut rng,
        );
        let video_fc1 = Linear::new(&mut store, "video.fc1", dims.frame_features(), dims.hidden, &mut rng);
        let video_fc2 = Linear::new(&mut store, "video.fc2", dims.hidden, dims.embed, &mut rng);
        let audio_in = dims.window() * dims.audio_raw_dim;
        let audio_fc1 = Linear::new(&mut store, "audio.fc1", audio_in, dims.hidden, &mut rng);
        let audio_fc2 = Linear::new(&mut store, "audio.fc2", dims.hidden, dims.embed, &mut rng);
        let log_tau = store.add("log_tau", Tensor::scalar(S::c(cfg.tau_init.ln())));
        SyncEncoders {
            dims,
            store,
            conv1,
            conv2,
            video_fc1,
            video_fc2,
            audio_fc1,
            audio_fc2,
            log_tau,
        }
    }

    pub fn cast<T: Scalar>(&self) -> SyncEncoders<T> {
        SyncEncoders {
            dims: self.dims.clone(),
            store: self.store.cast(),
            conv1: self.conv1.clone(),
            conv2: self.conv2.clone(),
            video_fc1: self.video_fc1.clone(),
            video_fc2: self.video_fc2.clone(),
            audio_fc1: self.audio_fc1.clone(),
            audio_fc2: self.audio_fc2.clone(),
            log_tau: self.log_tau,
        }
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn tau(&self) -> S {
        let lt = self.store.value(self.log_tau).item();
        lt.max(S::c(LOG_TAU_MIN)).min(S::c(LOG_TAU_MAX)).exp()
    }

    pub fn tau_var(&self, g: &mut Graph<S>) -> Var {
        let lt = g.param(&self.store, self.log_tau);
        let lt = g.clamp(lt, S::c(LOG_TAU_MIN), S::c(LOG_TAU_MAX));
        g.exp(lt)
    }

    /// Unit-norm embeddings of `n` windows stacked window-major as
    /// `[n * window x 3HW]` rows. Returns `[n x embed]`.
    pub fn embed_video(&self, g: &mut Graph<S>, frames: Var) -> Result<Var> {
        let (rows, cols) = g.shape(frames);
        let w = self.dims.window();
        if cols != self.dims.pixels() || rows % w != 0 {
            return Err(Error::Shape(format!(
                "video windows must be [n*{w} x {}], got [{rows} x {cols}]",
                self.dims.pixels()
            )));
        }
        let n = rows / w;
        let h = self.conv1.forward(g, &self.store, frames);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, &self.store, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let ff = self.dims.frame_features();
        let stacked = g.reshape(h, n, w * ff);
        let pool = g.constant(mean_pool_matrix(w, ff));
        let pooled = g.matmul(stacked, pool);
        let h = self.video_fc1.forward(g, &self.store, pooled);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let e = self.video_fc2.forward(g, &self.store, h);
        Ok(l2_normalize_rows(g, e, NORM_EPS))
    }

    /// Unit-norm embeddings of `[n x window*audio_raw_dim]` audio segments.
    pub fn embed_audio(&self, g: &mut Graph<S>, segments: Var) -> Result<Var> {
        let cols = g.shape(segments).1;
        let want = self.dims.window() * self.dims.audio_raw_dim;
        if cols != want {
            return Err(Error::Shape(format!("audio segments need {want} columns, got {cols}")));
        }
        let h = self.audio_fc1.forward(g, &self.store, segments);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let e = self.audio_fc2.forward(g, &self.store, h);
        Ok(l2_normalize_rows(g, e, NORM_EPS))
    }

    /// Embed without tracking gradients of interest; convenience for scoring.
    pub fn embed_pair(&self, video: &Tensor<S>, audio: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let v = g.constant(video.clone());
        let a = g.constant(audio.clone());
        let ve = self.embed_video(&mut g, v)?;
        let ae = self.embed_audio(&mut g, a)?;
        Ok((g.value(ve).clone(), g.value(ae).clone()))
    }

    pub fn to_archive(&self, config_hash: &str) -> Archive<S> {
        let mut a = Archive::new();
        a.set_meta("kind", "sync");
        a.set_meta("config_hash", config_hash);
        a.set_meta("frozen", self.is_frozen());
        for (_, p) in self.store.iter() {
            a.push(p.name.clone(), p.value.clone());
        }
        a
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        self.to_archive(&cfg.sync_hash()).save(path)
    }

    /// Load encoders for `cfg`. The stored config hash must match.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let a = Archive::<S>::load(path)?;
        Self::from_archive(&a, cfg)
    }

    pub fn from_archive(a: &Archive<S>, cfg: &ModelConfig) -> Result<Self> {
        if a.meta("kind")? != "sync" {
            return Err(Error::Format("not a sync checkpoint".into()));
        }
        if a.meta("config_hash")? != cfg.sync_hash() {
            return Err(Error::Config(
                "sync checkpoint was written under a different configuration".into(),
            ));
        }
        let mut enc = SyncEncoders::new(cfg, 0);
        enc.store.load_values(&a.tensors)?;
        if a.meta("frozen")? == "true" {
            enc.freeze();
        }
        Ok(enc)
    }
}

/// `[window*ff x ff]` matrix averaging `window` consecutive feature blocks.
fn mean_pool_matrix<S: Scalar>(window: usize, ff: usize) -> Tensor<S> {
    let mut p = Tensor::zeros(window * ff, ff);
    let v = S::c(1.0 / window as f64);
    for j in 0..window {
        for c in 0..ff {
            p.set(j * ff + c, c, v);
        }
    }
    p
}

/// `cos(v, a) / tau` for unit-norm inputs.
pub fn sync_score<S: Scalar>(v: &[S], a: &[S], tau: S) -> S {
    v.iter().zip(a).map(|(&x, &y)| x * y).sum::<S>() / tau
}

/// Video frames `center-T_s..=center+T_s` as `[window x 3HW]`.
pub fn video_window<S: Scalar>(frames: &Tensor<S>, center: usize, half: usize) -> Result<Tensor<S>> {
    if center < half || center + half >= frames.rows {
        return Err(Error::Index(format!(
            "window centered at {center} does not fit {} frames",
            frames.rows
        )));
    }
    Ok(frames.slice_rows(center - half, 2 * half + 1))
}

/// Raw audio rows `center-T_s..=center+T_s` concatenated into one row.
pub fn audio_segment<S: Scalar>(audio: &Tensor<S>, center: usize, half: usize) -> Result<Tensor<S>> {
    if center < half || center + half >= audio.rows {
        return Err(Error::Index(format!(
            "audio segment centered at {center} does not fit {} frames",
            audio.rows
        )));
    }
    let s = audio.slice_rows(center - half, 2 * half + 1);
    Ok(Tensor::from_vec(1, s.len(), s.data))
}

/// Aligned and optionally misaligned windows for one contrastive step.
#[derive(Clone, Debug)]
pub struct SyncBatch<S> {
    /// `[M*window x 3HW]`, window i in-sync with audio row i.
    pub video: Tensor<S>,
    /// `[M x window*audio_raw_dim]`
    pub audio: Tensor<S>,
    /// Audio at a shifted position for each video window.
    pub shifted_audio: Option<Tensor<S>>,
    /// Video at a shifted position for each audio segment.
    pub shifted_video: Option<Tensor<S>>,
}

impl<S: Scalar> SyncBatch<S> {
    pub fn len(&self) -> usize {
        self.audio.rows
    }

    pub fn is_empty(&self) -> bool {
        self.audio.rows == 0
    }
}

/// Off-sync pair for window `k`: `(video at k, audio at k+shift)` and the
/// audio-fixed mirror `(video at k+shift, audio at k)`.
pub fn sample_offsync<S: Scalar>(
    clip: &SyntheticClip<S>,
    k: usize,
    shift: isize,
    half: usize,
) -> Result<((Tensor<S>, Tensor<S>), (Tensor<S>, Tensor<S>))> {
    if shift.unsigned_abs() <= half {
        return Err(Error::Precondition(format!(
            "shift {shift} is within the sync half-window {half}"
        )));
    }
    let other = k as isize + shift;
    if other < 0 {
        return Err(Error::Index(format!("shifted center {other} is negative")));
    }
    let other = other as usize;
    let v_k = video_window(&clip.frames, k, half)?;
    let a_k = audio_segment(&clip.audio_raw, k, half)?;
    let v_s = video_window(&clip.frames, other, half)?;
    let a_s = audio_segment(&clip.audio_raw, other, half)?;
    Ok(((v_k, a_s), (v_s, a_k)))
}

/// Symmetric softmax contrastive loss. Video i is scored against every
/// aligned audio segment plus the shifted ones; audio i likewise.
pub fn contrastive_loss<S: Scalar>(
    enc: &SyncEncoders<S>,
    g: &mut Graph<S>,
    batch: &SyncBatch<S>,
) -> Result<Var> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::Precondition("empty sync batch".into()));
    }
    let v = g.constant(batch.video.clone());
    let a = g.constant(batch.audio.clone());
    let ve = enc.embed_video(g, v)?;
    let ae = enc.embed_audio(g, a)?;
    let a_all = match &batch.shifted_audio {
        Some(sa) => {
            let s = g.constant(sa.clone());
            let se = enc.embed_audio(g, s)?;
            g.concat_rows(&[ae, se])
        }
        None => ae,
    };
    let v_all = match &batch.shifted_video {
        Some(sv) => {
            let s = g.constant(sv.clone());
            let se = enc.embed_video(g, s)?;
            g.concat_rows(&[ve, se])
        }
        None => ve,
    };
    let tau = enc.tau_var(g);
    Ok(contrastive_from_embeddings(g, ve, ae, v_all, a_all, tau, m))
}

/// Loss from already-computed embeddings; the first `m` rows of `v_all` and
/// `a_all` are the aligned pairs.
pub fn contrastive_from_embeddings<S: Scalar>(
    g: &mut Graph<S>,
    ve: Var,
    ae: Var,
    v_all: Var,
    a_all: Var,
    tau: Var,
    m: usize,
) -> Var {
    let diag_pick: Tensor<S> = {
        let na = g.shape(a_all).0;
        let mut t = Tensor::zeros(m, na);
        for i in 0..m {
            t.set(i, i, S::one());
        }
        t
    };
    let v2a = g.matmul_t(ve, a_all);
    let v2a = g.div(v2a, tau);
    let v2a = g.log_softmax_rows(v2a);
    let pick = g.constant(diag_pick);
    let v2a = g.mul(v2a, pick);
    let v2a = g.sum(v2a);

    let nv = g.shape(v_all).0;
    let mut pick2 = Tensor::zeros(m, nv);
    for i in 0..m {
        pick2.set(i, i, S::one());
    }
    let a2v = g.matmul_t(ae, v_all);
    let a2v = g.div(a2v, tau);
    let a2v = g.log_softmax_rows(a2v);
    let pick2 = g.constant(pick2);
    let a2v = g.mul(a2v, pick2);
    let a2v = g.sum(a2v);
    let total = g.add(v2a, a2v);
    g.scale(total, S::c(-0.5 / m as f64))
}

/// Draw a training batch of `m` distinct clips with random centers, plus one
/// time-shift negative per clip in each direction.
pub fn sample_batch<S: Scalar>(
    clips: &[&SyntheticClip<S>],
    m: usize,
    half: usize,
    shift_max: usize,
    rng: &mut impl Rng,
) -> Result<SyncBatch<S>> {
    let m = m.min(clips.len());
    let picks = sample(rng, clips.len(), m).into_vec();
    let (mut v, mut a, mut sv, mut sa) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in &picks {
        let clip = clips[i];
        let len = clip.len();
        if len < 2 * half + 1 + 2 * (half + 1) {
            return Err(Error::Precondition("clip too short for shifted negatives".into()));
        }
        let k = rng.random_range(half..len - half);
        let shift = draw_shift(k, len, half, shift_max, rng);
        let ((vk, as_), (vs, ak)) = sample_offsync(clip, k, shift, half)?;
        v.push(vk);
        a.push(ak);
        sv.push(vs);
        sa.push(as_);
    }
    Ok(SyncBatch {
        video: stack_rows(&v),
        audio: stack_rows(&a),
        shifted_audio: Some(stack_rows(&sa)),
        shifted_video: Some(stack_rows(&sv)),
    })
}

/// A shift with magnitude in `[half+1, shift_max]` keeping the shifted
/// window inside the clip.
fn draw_shift(k: usize, len: usize, half: usize, shift_max: usize, rng: &mut impl Rng) -> isize {
    let lo = half + 1;
    let fits = |s: isize| {
        let c = k as isize + s;
        c >= half as isize && c + (half as isize) < len as isize
    };
    let options: Vec<isize> = (lo..=shift_max.max(lo))
        .flat_map(|d| [d as isize, -(d as isize)])
        .filter(|&s| fits(s))
        .collect();
    if options.is_empty() {
        // Farthest valid shift beyond the half window.
        let s = (lo as isize..len as isize)
            .flat_map(|d| [d, -d])
            .find(|&s| fits(s))
            .expect("clip long enough for a shifted window");
        return s;
    }
    options[rng.random_range(0..options.len())]
}

pub fn stack_rows<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    let cols = parts.first().map_or(0, |p| p.cols);
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        debug_assert_eq!(p.cols, cols);
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(data.len() / cols.max(1), cols, data)
}

/// Outcome of pretraining.
#[derive(Clone, Debug)]
pub struct SyncTraining {
    pub encoders: SyncEncoders<f32>,
    pub losses: Vec<f64>,
}

/// Train the towers on `clips` and return them frozen.
pub fn pretrain_sync(clips: &[SyntheticClip<f32>], cfg: &ModelConfig, seed: u64) -> Result<SyncTraining> {
    let mut enc = SyncEncoders::<f32>::new(cfg, seed);
    let mut opt = Adam::new(&enc.store, cfg.sync_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A11);
    let refs: Vec<&SyntheticClip<f32>> = clips.iter().collect();
    if refs.len() < 2 {
        return Err(Error::Precondition("sync pretraining needs at least two clips".into()));
    }
    let mut losses = Vec::with_capacity(cfg.sync_steps);
    for _ in 0..cfg.sync_steps {
        let batch = sample_batch(&refs, cfg.sync_batch, cfg.sync_half_window, cfg.sync_shift_max, &mut rng)?;
        let mut g = Graph::new();
        let loss = contrastive_loss(&enc, &mut g, &batch)?;
        let l = g.item(loss).f64();
        if !l.is_finite() {
            return Err(Error::Training(format!("non-finite sync loss at step {}", losses.len())));
        }
        losses.push(l);
        let grads = g.backward(loss);
        enc.store.accumulate(&g, &grads);
        let norm = enc.store.grad_norm().f64();
        if norm > cfg.grad_clip {
            enc.store.scale_grads((cfg.grad_clip / norm) as f32);
        }
        opt.update(&mut enc.store)?;
    }
    enc.freeze();
    Ok(SyncTraining {
        encoders: enc,
        losses,
    })
}

/// Top-1 retrieval accuracy: for groups of `m` clips, each video window must
/// score highest against its own audio among the group's `m` segments.
pub fn retrieval_accuracy<S: Scalar>(
    enc: &SyncEncoders<S>,
    clips: &[SyntheticClip<S>],
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = enc.dims.half_window;
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..trials {
        let picks = sample(&mut rng, clips.len(), m.min(clips.len())).into_vec();
        let mut v = Vec::new();
        let mut a = Vec::new();
        for &i in &picks {
            let c = &clips[i];
            let k = rng.random_range(half..c.len() - half);
            v.push(video_window(&c.frames, k, half)?);
            a.push(audio_segment(&c.audio_raw, k, half)?);
        }
        let (ve, ae) = enc.embed_pair(&stack_rows(&v), &stack_rows(&a))?;
        let sims = ve.matmul(&ae.transpose());
        for i in 0..sims.rows {
            let row = sims.row(i);
            let best = (0..row.len())
                .max_by(|&x, &y| row[x].partial_cmp(&row[y]).unwrap())
                .unwrap();
            hits += usize::from(best == i);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
