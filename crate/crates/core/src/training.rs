//! Windowed generation, the training objective, the optimization loop and
//! checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::dataset::derive_seed;
use crate::error::{Error, Result};
use crate::model::TalkerModel;
use crate::params::Adam;
use crate::perceptual::{loss_l2, Perceptual};
use crate::posterior::sample_posterior;
use crate::prior::kl_loss;
use crate::prob::standard_normal;
use crate::scalar::Scalar;
use crate::sync::{audio_segment, SyncEncoders};
use crate::tensor::Tensor;
use crate::tensor_io::Archive;
use crate::world::{build_world, SyntheticClip, WorldParams};

/// Seed of the frozen perceptual extractor.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_0f_1e55;
/// Header of the per-step metrics stream.
pub const METRICS_HEADER: &str = "step,loss_total,loss_l2,loss_lpips,loss_kl,loss_sync";

const STREAM_BATCH: u64 = 0x7a11;

/// Frames `t..t+window` of the output codes `w_hat: [T x L*D]`, rendered.
pub fn generate_window<S: Scalar>(world: &WorldParams<S>, w_hat: &Tensor<S>, t: usize, window: usize) -> Result<Tensor<S>> {
    if t + window > w_hat.rows {
        return Err(Error::Index(format!(
            "window {t}..{} exceeds {} frames",
            t + window,
            w_hat.rows
        )));
    }
    Ok(world.render_rows(&w_hat.slice_rows(t, window)))
}

/// `1 - cos(f_v(V), f_a(A))` averaged over windows. `video` holds `n`
/// windows stacked window-major, `audio` one segment per window.
pub fn loss_sync<S: Scalar>(g: &mut Graph<S>, enc: &SyncEncoders<S>, video: Var, audio: Var) -> Result<Var> {
    let n = g.shape(audio).0;
    let w = enc.dims.window();
    if g.shape(video).0 != n * w {
        return Err(Error::Shape(format!(
            "sync loss needs {w}-frame windows, got {} rows for {n} segments",
            g.shape(video).0
        )));
    }
    let ve = enc.embed_video(g, video)?;
    let ae = enc.embed_audio(g, audio)?;
    Ok(cosine_distance(g, ve, ae))
}

/// Mean of `1 - <u_i, v_i>` over rows of unit vectors.
pub fn cosine_distance<S: Scalar>(g: &mut Graph<S>, u: Var, v: Var) -> Var {
    let p = g.mul(u, v);
    let c = g.row_sum(p);
    let m = g.mean(c);
    let nm = g.neg(m);
    g.add_scalar(nm, S::one())
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l2: f64,
    pub lpips: f64,
    pub kl: f64,
    pub sync: f64,
}

/// `L_lpips + l1 * L2 + l2 * L_kl + l4 * L_sync`.
pub fn total_loss(c: &LossComponents, lambda_1: f64, lambda_2: f64, lambda_4: f64) -> Result<f64> {
    for (name, v) in [("l2", c.l2), ("lpips", c.lpips), ("kl", c.kl), ("sync", c.sync)] {
        if !v.is_finite() {
            return Err(Error::Training(format!("loss component {name} is {v}")));
        }
    }
    Ok(c.lpips + lambda_1 * c.l2 + lambda_2 * c.kl + lambda_4 * c.sync)
}

/// KL weight at `step` (0-based) under linear warm-up.
pub fn kl_weight(cfg: &ModelConfig, step: u64) -> f64 {
    if !cfg.kl_warmup {
        return cfg.lambda_2;
    }
    let ramp = (cfg.kl_warmup_frac * cfg.train_steps as f64).max(1.0);
    cfg.lambda_2 * ((step + 1) as f64 / ramp).min(1.0)
}

/// Data of one step, time-major with `batch` sequences.
#[derive(Clone, Debug)]
pub struct TrainBatch<S> {
    pub batch: usize,
    pub frames: usize,
    /// `[T*B x L*D]`
    pub styles: Tensor<S>,
    /// `[T*B x d_raw]`
    pub audio: Tensor<S>,
    /// Generation window start per sequence.
    pub offsets: Vec<usize>,
    /// Sync window center within the generation window, per sequence.
    pub centers: Vec<usize>,
    /// Rendered target for every window row, `[T_w*B x 3HW]`.
    pub target: Tensor<S>,
    /// Raw audio segment around each sync center, `[B x window*d_raw]`.
    pub sync_audio: Tensor<S>,
    /// Standard normal noise per edited layer, `[T*B x d_m]`.
    pub noise: Vec<Tensor<S>>,
}

/// Rows `(o_b + j) * B + b` of a time-major sequence for window frame j.
pub fn window_rows(offsets: &[usize], window: usize) -> Vec<usize> {
    let b = offsets.len();
    let mut idx = Vec::with_capacity(window * b);
    for j in 0..window {
        for (s, &o) in offsets.iter().enumerate() {
            idx.push((o + j) * b + s);
        }
    }
    idx
}

/// Draw a batch: clips, window offsets and sync centers uniformly, plus the
/// posterior noise.
pub fn sample_batch<S: Scalar>(clips: &[SyntheticClip<S>], cfg: &ModelConfig, rng: &mut impl Rng) -> Result<TrainBatch<S>> {
    let (b, t, tw, ts) = (cfg.batch_size, cfg.seq_len, cfg.window, cfg.sync_half_window);
    if clips.is_empty() {
        return Err(Error::Precondition("no training clips".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.len() < t) {
        return Err(Error::Precondition(format!("clip {} has {} frames, need {t}", c.seed, c.len())));
    }
    let picks: Vec<&SyntheticClip<S>> = (0..b).map(|_| &clips[rng.random_range(0..clips.len())]).collect();
    let offsets: Vec<usize> = (0..b).map(|_| rng.random_range(0..=t - tw)).collect();
    let centers: Vec<usize> = (0..b).map(|_| rng.random_range(ts..=tw - 1 - ts)).collect();
    let ld = picks[0].styles.frames[0].flat().len();
    let px = picks[0].frames.cols;
    let dr = picks[0].audio_raw.cols;
    let mut styles = Tensor::zeros(t * b, ld);
    let mut audio = Tensor::zeros(t * b, dr);
    for ti in 0..t {
        for (s, c) in picks.iter().enumerate() {
            styles.row_mut(ti * b + s).copy_from_slice(c.styles.frames[ti].flat());
            audio.row_mut(ti * b + s).copy_from_slice(c.audio_raw.row(ti));
        }
    }
    let mut target = Tensor::zeros(tw * b, px);
    for j in 0..tw {
        for (s, c) in picks.iter().enumerate() {
            target.row_mut(j * b + s).copy_from_slice(c.frames.row(offsets[s] + j));
        }
    }
    let mut sync_audio = Tensor::zeros(b, (2 * ts + 1) * dr);
    for (s, c) in picks.iter().enumerate() {
        let seg = audio_segment(&c.audio_raw, offsets[s] + centers[s], ts)?;
        sync_audio.row_mut(s).copy_from_slice(&seg.data);
    }
    let noise = (0..cfg.edit_layers).map(|_| standard_normal(rng, t * b, cfg.motion_dim)).collect();
    Ok(TrainBatch {
        batch: b,
        frames: t,
        styles,
        audio,
        offsets,
        centers,
        target,
        sync_audio,
        noise,
    })
}

/// Graph nodes of the losses for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l2: Var,
    pub lpips: Var,
    pub kl: Var,
    pub sync: Option<Var>,
    /// Rendered window `[T_w*B x 3HW]`.
    pub frames: Var,
}

/// Build the full training objective for `batch` on `g`.
pub fn batch_losses<S: Scalar>(
    g: &mut Graph<S>,
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    perceptual: &Perceptual<S>,
    sync: Option<&SyncEncoders<S>>,
    batch: &TrainBatch<S>,
) -> Result<LossVars> {
    let cfg = &model.cfg;
    let (b, t, tw, ts) = (batch.batch, batch.frames, cfg.window, cfg.sync_half_window);
    let edit_len = world.dims.edit_len();
    let sty = g.constant(batch.styles.clone());
    let aud = g.constant(batch.audio.clone());
    let a = model.encode_audio(g, aud, b);
    let win = window_rows(&batch.offsets, tw);
    let ref_rows: Vec<usize> = (0..tw * b).map(|r| r % b).collect();

    let mut kl_total = None;
    let mut outs = Vec::with_capacity(model.edit_layers());
    for i in 0..model.edit_layers() {
        let w = model.layer_codes(g, sty, i);
        let post = model.posterior(g, i, w, a, b);
        let eps = g.constant(batch.noise[i].clone());
        let m = sample_posterior(g, post, eps);
        let w0 = g.slice_rows(w, 0, b);
        let layer = &model.layers[i];
        let kl = kl_loss(g, &model.store, post, m, &layer.prior, &layer.flow, a, w0, b);
        kl_total = Some(match kl_total {
            None => kl,
            Some(k) => g.add(k, kl),
        });
        let c = model.controls(g, i, a, m, b);
        let cw = g.gather_rows(c, win.clone());
        let wr = g.gather_rows(w0, ref_rows.clone());
        outs.push(model.manipulate(g, i, wr, cw));
    }
    let kl_sum = kl_total.ok_or_else(|| Error::Config("no edited layers".into()))?;
    // Mean over frames and over edited layers.
    let kl = g.scale(kl_sum, S::c(1.0 / (t * model.edit_layers()) as f64));

    let w_edit = g.concat_cols(&outs);
    let fine_ref = batch.styles.slice_rows(0, b).slice_cols(edit_len, batch.styles.cols - edit_len);
    let fine_r = world.render_t.slice_rows(edit_len, world.render_t.rows - edit_len);
    let fine = fine_ref.matmul(&fine_r);
    let mut offset = Tensor::zeros(tw * b, fine.cols);
    for r in 0..tw * b {
        offset.row_mut(r).copy_from_slice(fine.row(r % b));
    }
    let offset = g.constant(offset);
    let frames = world.render_edit_graph(g, w_edit, offset);

    let target = g.constant(batch.target.clone());
    let l2 = loss_l2(g, frames, target)?;
    let lpips = perceptual.loss(g, frames, target)?;

    let sync = match sync {
        Some(enc) => {
            let mut idx = Vec::with_capacity(b * (2 * ts + 1));
            for s in 0..b {
                for j in batch.centers[s] - ts..=batch.centers[s] + ts {
                    idx.push(j * b + s);
                }
            }
            let video = g.gather_rows(frames, idx);
            let audio = g.constant(batch.sync_audio.clone());
            Some(loss_sync(g, enc, video, audio)?)
        }
        None => None,
    };
    Ok(LossVars {
        l2,
        lpips,
        kl,
        sync,
        frames,
    })
}

/// Weighted objective node: `lpips + l1*l2 + l2w*kl + l4*sync`.
pub fn objective<S: Scalar>(g: &mut Graph<S>, v: &LossVars, cfg: &ModelConfig, kl_w: f64) -> Var {
    let l2 = g.scale(v.l2, S::c(cfg.lambda_1));
    let kl = g.scale(v.kl, S::c(kl_w));
    let mut total = g.add(v.lpips, l2);
    total = g.add(total, kl);
    if let Some(s) = v.sync {
        let s = g.scale(s, S::c(cfg.lambda_4));
        total = g.add(total, s);
    }
    total
}

/// Everything that evolves or is referenced during training.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: TalkerModel<S>,
    pub adam: Adam<S>,
    pub step: u64,
    pub seed: u64,
    pub world_seed: u64,
    pub world: WorldParams<S>,
    pub perceptual: Perceptual<S>,
    pub sync: Option<SyncEncoders<S>>,
}

/// Per-step record written to the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub parts: LossComponents,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.parts.l2, self.parts.lpips, self.parts.kl, self.parts.sync
        )
    }
}

impl<S: Scalar> TrainState<S> {
    /// Fresh state. `sync` must be frozen when the config asks for the sync
    /// loss.
    pub fn new(cfg: &ModelConfig, world: &WorldParams<f64>, sync: Option<SyncEncoders<S>>, seed: u64) -> Result<Self> {
        if let Some(s) = &sync {
            if !s.is_frozen() {
                return Err(Error::Precondition("sync encoders must be frozen before training".into()));
            }
        }
        if cfg.use_sync_loss && sync.is_none() {
            return Err(Error::Precondition(
                "the sync loss needs a frozen sync checkpoint".into(),
            ));
        }
        let model = TalkerModel::new(cfg, derive_seed(seed, 0x30de1, 0))?;
        let adam = Adam::new(&model.store, cfg.learning_rate);
        Ok(TrainState {
            model,
            adam,
            step: 0,
            seed,
            world_seed: world.seed,
            world: world.cast(),
            perceptual: Perceptual::new(cfg.image_size, cfg.perceptual_channels, cfg.perceptual_gain, PERCEPTUAL_SEED)?,
            sync: if cfg.use_sync_loss { sync } else { None },
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    /// Batch for the current step; depends only on `(seed, step)`.
    pub fn batch_for_step(&self, clips: &[SyntheticClip<S>]) -> Result<TrainBatch<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_BATCH, self.step));
        sample_batch(clips, self.cfg(), &mut rng)
    }

    fn init_actnorm(&mut self, batch: &TrainBatch<S>) {
        let b = batch.batch;
        let mut g = Graph::new();
        let sty = g.constant(batch.styles.clone());
        let aud = g.constant(batch.audio.clone());
        let a = self.model.encode_audio(&mut g, aud, b);
        let mut ms = Vec::new();
        for i in 0..self.model.edit_layers() {
            let w = self.model.layer_codes(&mut g, sty, i);
            let post = self.model.posterior(&mut g, i, w, a, b);
            let eps = g.constant(batch.noise[i].clone());
            ms.push(sample_posterior(&mut g, post, eps));
        }
        let a_t = g.value(a).clone();
        for (i, m) in ms.into_iter().enumerate() {
            let m_t = g.value(m).clone();
            let flow = self.model.layers[i].flow.clone();
            flow.init_actnorm(&mut self.model.store, &m_t, &a_t, b);
        }
        self.model.actnorm_ready = true;
    }

    /// One optimizer step on the batch of the current step.
    pub fn train_step(&mut self, clips: &[SyntheticClip<S>]) -> Result<StepMetrics> {
        let batch = self.batch_for_step(clips)?;
        if !self.model.actnorm_ready {
            self.init_actnorm(&batch);
        }
        let cfg = self.model.cfg.clone();
        let kl_w = kl_weight(&cfg, self.step);
        let mut g = Graph::new();
        let vars = batch_losses(&mut g, &self.model, &self.world, &self.perceptual, self.sync.as_ref(), &batch)?;
        let total = objective(&mut g, &vars, &cfg, kl_w);
        let parts = LossComponents {
            l2: g.item(vars.l2).f64(),
            lpips: g.item(vars.lpips).f64(),
            kl: g.item(vars.kl).f64(),
            sync: vars.sync.map_or(0.0, |s| g.item(s).f64()),
        };
        let value = g.item(total).f64();
        total_loss(&parts, cfg.lambda_1, kl_w, if vars.sync.is_some() { cfg.lambda_4 } else { 0.0 })
            .and_then(|_| {
                if value.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Training(format!("total loss is {value}")))
                }
            })
            .map_err(|e| Error::Training(format!("step {}: {e}", self.step)))?;
        let grads = g.backward(total);
        self.model.store.accumulate(&g, &grads);
        let norm = self.model.store.grad_norm().f64();
        if !norm.is_finite() {
            return Err(Error::Training(format!("step {}: gradient norm is {norm}", self.step)));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            self.model.store.scale_grads(S::c(cfg.grad_clip / norm));
        }
        self.adam.update(&mut self.model.store)?;
        let m = StepMetrics {
            step: self.step,
            total: value,
            parts,
        };
        self.step += 1;
        Ok(m)
    }

    /// Run until `until` steps have been taken, writing one CSV row per step
    /// and a checkpoint every `every` steps (and at the end) when `ckpt` is
    /// given. On divergence the error names the last good checkpoint.
    pub fn train(
        &mut self,
        clips: &[SyntheticClip<S>],
        until: u64,
        log: &mut dyn Write,
        ckpt: Option<(&Path, u64)>,
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        let mut last_good: Option<PathBuf> = None;
        while self.step < until {
            let m = self.train_step(clips).map_err(|e| match (&e, &last_good) {
                (Error::Training(msg), Some(p)) => {
                    Error::Training(format!("{msg}; last good checkpoint: {}", p.display()))
                }
                (Error::Training(msg), None) => Error::Training(format!("{msg}; no checkpoint written yet")),
                _ => e,
            })?;
            writeln!(log, "{}", m.csv_row())?;
            out.push(m);
            if let Some((path, every)) = ckpt {
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == until {
                    self.save(path)?;
                    last_good = Some(path.to_path_buf());
                }
            }
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive<S> {
        let mut a = self.model.to_archive();
        a.set_meta("kind", "checkpoint");
        a.set_meta("step", self.step);
        a.set_meta("seed", self.seed);
        a.set_meta("world_seed", self.world_seed);
        a.set_meta("adam_step", self.adam.step);
        a.set_meta("has_sync", self.sync.is_some());
        for ((_, p), (m, v)) in self.model.store.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            a.push(format!("adam_m.{}", p.name), m.clone());
            a.push(format!("adam_v.{}", p.name), v.clone());
        }
        if let Some(s) = &self.sync {
            for (_, p) in s.store.iter() {
                a.push(format!("sync.{}", p.name), p.value.clone());
            }
        }
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Restore a checkpoint. Run settings (learning rate, steps, weights)
    /// come from `cfg`; the architecture must match the stored one.
    pub fn from_archive(a: &Archive<S>, cfg: &ModelConfig) -> Result<Self> {
        if a.meta("kind")? != "checkpoint" {
            return Err(Error::Format("not a training checkpoint".into()));
        }
        let parse = |k: &str| -> Result<u64> {
            a.meta(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k} in checkpoint")))
        };
        let model = TalkerModel::from_archive(a, cfg)?;
        let mut adam = Adam::new(&model.store, cfg.learning_rate);
        adam.step = parse("adam_step")?;
        for (i, (_, p)) in model.store.iter().enumerate() {
            adam.m[i] = a.get(&format!("adam_m.{}", p.name))?.clone();
            adam.v[i] = a.get(&format!("adam_v.{}", p.name))?.clone();
        }
        let world_seed = parse("world_seed")?;
        let world = build_world(cfg, world_seed)?;
        let sync = if a.meta("has_sync")? == "true" {
            let mut enc = SyncEncoders::<S>::new(cfg, 0);
            enc.store.load_values(&a.group("sync"))?;
            enc.freeze();
            Some(enc)
        } else {
            None
        };
        Ok(TrainState {
            model,
            adam,
            step: parse("step")?,
            seed: parse("seed")?,
            world_seed,
            world: world.cast(),
            perceptual: Perceptual::new(cfg.image_size, cfg.perceptual_channels, cfg.perceptual_gain, PERCEPTUAL_SEED)?,
            sync: if cfg.use_sync_loss { sync } else { None },
        })
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let c = LossComponents {
            l2: 1.0,
            lpips: 1.0,
            kl: 1.0,
            sync: 1.0,
        };
        assert!((total_loss(&c, 0.1, 0.1, 0.1).unwrap() - 1.3).abs() < 1e-12);
        assert_eq!(total_loss(&c, 0.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(&LossComponents::default(), 0.1, 0.1, 0.1).unwrap(), 0.0);
        let d = LossComponents { l2: 2.0, ..LossComponents::default() };
        assert_eq!(total_loss(&d, 0.2, 0.1, 0.1).unwrap(), 2.0 * total_loss(&d, 0.1, 0.1, 0.1).unwrap());
        let bad = LossComponents { kl: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, 0.1, 0.1, 0.1), Err(Error::Training(_))));
    }

    #[test]
    fn kl_warmup_ramps_linearly() {
        let cfg = ModelConfig {
            train_steps: 100,
            ..ModelConfig::default()
        };
        assert!((kl_weight(&cfg, 0) - 0.01).abs() < 1e-12);
        assert!((kl_weight(&cfg, 4) - 0.05).abs() < 1e-12);
        assert_eq!(kl_weight(&cfg, 9), 0.1);
        assert_eq!(kl_weight(&cfg, 50), 0.1);
        let off = ModelConfig {
            kl_warmup: false,
            ..cfg
        };
        assert_eq!(kl_weight(&off, 0), 0.1);
    }

    #[test]
    fn window_rows_are_time_major() {
        assert_eq!(window_rows(&[0, 3], 2), vec![0, 7, 2, 9]);
    }

    #[test]
    fn sync_distance_closed_forms() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::from_f64(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let same = g.constant(Tensor::from_f64(1, 2, &[1.0, 0.0]));
        let d = cosine_distance(&mut g, same, same);
        assert_eq!(g.item(d), 0.0);
        let orth = g.constant(Tensor::from_f64(1, 2, &[0.0, 1.0]));
        let d = cosine_distance(&mut g, same, orth);
        assert_eq!(g.item(d), 1.0);
        let anti = g.constant(Tensor::from_f64(1, 2, &[-1.0, 0.0]));
        let d = cosine_distance(&mut g, same, anti);
        assert_eq!(g.item(d), 2.0);
        let v = g.constant(Tensor::from_f64(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0]));
        let d = cosine_distance(&mut g, u, v);
        // dots 1, 0, -1
        assert!((g.item(d) - 1.0).abs() < 1e-12);
    }
}

#[cfg(test)]
pub(crate) mod run_tests {
    use super::*;
    use crate::dataset::synthesize;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            style_layers: 4,
            edit_layers: 2,
            style_dim: 8,
            identity_dim: 3,
            lip_dim: 2,
            distractor_channels: 2,
            motion_dim: 4,
            audio_dim: 3,
            seq_len: 20,
            window: 6,
            sync_half_window: 1,
            posterior_stem: 5,
            posterior_stem_out: 4,
            posterior_audio: 3,
            posterior_hidden: 5,
            prior_hidden: 5,
            prior_audio: 3,
            flow_steps: 2,
            flow_hidden: 4,
            control_channels: 7,
            audio_hidden: 5,
            sync_embed: 4,
            sync_hidden: 6,
            sync_conv_channels: 2,
            perceptual_channels: 2,
            batch_size: 3,
            train_steps: 10,
            learning_rate: 1e-3,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_state(cfg: &ModelConfig) -> (TrainState<f64>, Vec<SyntheticClip<f64>>) {
        let corpus = synthesize(cfg, 4, cfg.seq_len + 4, 11, 1).unwrap();
        let clips: Vec<SyntheticClip<f64>> = corpus.clips.iter().map(|c| c.cast()).collect();
        let sync = if cfg.use_sync_loss {
            let mut s = SyncEncoders::new(cfg, 3);
            s.freeze();
            Some(s)
        } else {
            None
        };
        (TrainState::new(cfg, &corpus.world, sync, 5).unwrap(), clips)
    }

    #[test]
    fn window_bounds() {
        let cfg = ModelConfig::default();
        let world = build_world(&cfg, 1).unwrap();
        let w = Tensor::zeros(64, cfg.style_layers * cfg.style_dim);
        assert_eq!(generate_window(&world, &w, 49, 15).unwrap().rows, 15);
        assert!(matches!(generate_window(&world, &w, 50, 15), Err(Error::Index(_))));
    }

    #[test]
    fn offsets_cover_the_valid_range() {
        let mut cfg = tiny_cfg();
        cfg.seq_len = 20;
        cfg.batch_size = 1;
        let corpus = synthesize(&cfg, 1, 20, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [0usize; 20];
        let mut centers = vec![0usize; cfg.window];
        for _ in 0..3000 {
            let b = sample_batch(&corpus.clips, &cfg, &mut rng).unwrap();
            seen[b.offsets[0]] += 1;
            centers[b.centers[0]] += 1;
        }
        let valid = 20 - cfg.window;
        assert!(seen[..=valid].iter().all(|&n| n > 0));
        assert!(seen[valid + 1..].iter().all(|&n| n == 0));
        assert_eq!(centers[0], 0);
        assert_eq!(centers[cfg.window - 1], 0);
        assert!(centers[1..cfg.window - 1].iter().all(|&n| n > 0));
    }

    #[test]
    fn batch_rows_match_clips() {
        let cfg = tiny_cfg();
        let corpus = synthesize(&cfg, 2, cfg.seq_len, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&corpus.clips, &cfg, &mut rng).unwrap();
        let pick = |s: usize| {
            corpus
                .clips
                .iter()
                .find(|c| c.styles.frames[0].flat() == b.styles.row(s))
                .unwrap()
        };
        for s in 0..cfg.batch_size {
            let c = pick(s);
            for j in 0..cfg.window {
                assert_eq!(b.target.row(j * cfg.batch_size + s), c.frames.row(b.offsets[s] + j));
            }
        }
        let short = synthesize(&cfg, 1, cfg.seq_len - 1, 3, 1).unwrap();
        assert!(sample_batch(&short.clips, &cfg, &mut rng).is_err());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_cfg();
        let (mut a, clips) = tiny_state(&cfg);
        let mut sink = Vec::new();
        let full = a.train(&clips, 6, &mut sink, None).unwrap();
        assert_eq!(full.len(), 6);
        assert!(full.iter().all(|m| m.total.is_finite() && m.parts.sync > 0.0));
        assert_eq!(String::from_utf8(sink).unwrap().lines().count(), 6);

        let (mut b, _) = tiny_state(&cfg);
        b.train(&clips, 3, &mut std::io::sink(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        b.save(&path).unwrap();
        let mut c = TrainState::<f64>::load(&path, &cfg).unwrap();
        assert_eq!(c.step, 3);
        assert_eq!(c.model.store.fingerprint(), b.model.store.fingerprint());
        let rest = c.train(&clips, 6, &mut std::io::sink(), None).unwrap();
        assert_eq!(rest, full[3..].to_vec());
        assert_eq!(c.model.store.fingerprint(), a.model.store.fingerprint());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let cfg = tiny_cfg();
        let (mut s, clips) = tiny_state(&cfg);
        s.train(&clips, 2, &mut std::io::sink(), None).unwrap();
        let a = s.to_archive();
        let r = TrainState::from_archive(&a, &cfg).unwrap();
        assert_eq!(r.to_archive(), a);
        let other = ModelConfig {
            motion_dim: 6,
            ..cfg.clone()
        };
        assert!(matches!(TrainState::<f64>::from_archive(&a, &other), Err(Error::Config(_))));
        // Run settings may differ on resume.
        let longer = ModelConfig {
            train_steps: 99,
            ..cfg
        };
        assert!(TrainState::<f64>::from_archive(&a, &longer).is_ok());
    }

    #[test]
    fn refuses_without_sync_unless_disabled() {
        let cfg = tiny_cfg();
        let corpus = synthesize(&cfg, 1, cfg.seq_len, 3, 1).unwrap();
        assert!(matches!(
            TrainState::<f64>::new(&cfg, &corpus.world, None, 1),
            Err(Error::Precondition(_))
        ));
        let unfrozen = SyncEncoders::new(&cfg, 3);
        assert!(TrainState::<f64>::new(&cfg, &corpus.world, Some(unfrozen), 1).is_err());
        let off = ModelConfig {
            use_sync_loss: false,
            ..cfg
        };
        let (mut s, clips) = tiny_state(&off);
        let m = s.train_step(&clips).unwrap();
        assert_eq!(m.parts.sync, 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_cfg();
        let (mut s, clips) = tiny_state(&cfg);
        s.train_step(&clips).unwrap();
        let id = s.model.store.iter().next().unwrap().0;
        s.model.store.value_mut(id).data[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = s.train(&clips, 3, &mut std::io::sink(), Some((&dir.path().join("c"), 1))).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("no checkpoint")), "{err}");
    }
}
