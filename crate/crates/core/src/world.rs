//! A frozen, exactly invertible toy world standing in for a pretrained
//! style-based generator, its image encoder, and a talking-head corpus.
//!
//! Ground-truth factors (identity, head pose, eye openness, lip state) map
//! linearly onto per-layer style codes; pose, eye and lip only touch the first
//! `edit_layers` codes. A fixed linear renderer turns codes into small RGB
//! frames, and lip state is a causal function of the synthetic audio.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{StylePlus, StyleSequence};

pub const POSE_DIM: usize = 3;
/// Closing over three frames, then reopening.
pub const BLINK_PROFILE: [f64; 5] = [2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0];
/// Frames after a blink onset during which no new blink starts.
pub const BLINK_REFRACTORY: usize = 20;
pub const POSE_DECAY: f64 = 0.95;
pub const POSE_NOISE: f64 = 0.1;
pub const SPEECH_AR: f64 = 0.8;
pub const LIP_GAIN: f64 = 1.2;
/// Moving-average length linking audio to lip state.
pub const LIP_CONTEXT: usize = 3;
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

const IDENTITY_STYLE_GAIN: f64 = 0.8;
const POSE_STYLE_GAIN: f64 = 1.5;
const EYE_STYLE_GAIN: f64 = 1.5;
const LIP_STYLE_GAIN: f64 = 0.6;
const BIAS_STYLE_STD: f64 = 0.5;
const RENDER_GAIN: f64 = 0.106;
const PIXEL_MEAN: f64 = 0.5;
const LANDMARK_POSE_GAIN: f64 = 1.5;
const LANDMARK_EYE_GAIN: f64 = 0.5;
const LANDMARK_LIP_GAIN: f64 = 0.5;

/// Sizes shared by every world built from one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldDims {
    pub layers: usize,
    pub edit_layers: usize,
    pub style_dim: usize,
    pub identity_dim: usize,
    pub lip_dim: usize,
    pub audio_raw_dim: usize,
    pub image_size: usize,
    pub landmarks: usize,
    pub mouth_landmarks: usize,
    pub fps: f64,
    pub blink_rate: f64,
}

impl WorldDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        WorldDims {
            layers: cfg.style_layers,
            edit_layers: cfg.edit_layers,
            style_dim: cfg.style_dim,
            identity_dim: cfg.identity_dim,
            lip_dim: cfg.lip_dim,
            audio_raw_dim: cfg.audio_raw_dim(),
            image_size: cfg.image_size,
            landmarks: cfg.landmarks,
            mouth_landmarks: cfg.mouth_landmarks,
            fps: cfg.fps,
            blink_rate: cfg.blink_rate,
        }
    }

    pub fn style_len(&self) -> usize {
        self.layers * self.style_dim
    }

    pub fn edit_len(&self) -> usize {
        self.edit_layers * self.style_dim
    }

    /// Edited layers carrying motion group `g` (0 pose, 1 eye, 2 lip): pose
    /// in the coarsest layer, eye in the next, lip in the rest. Groups share
    /// the last layer when there are fewer than three edited layers.
    pub fn motion_layers(&self, g: usize) -> std::ops::Range<usize> {
        let el = self.edit_layers;
        match g {
            0 => 0..1,
            1 => 1.min(el - 1)..1.min(el - 1) + 1,
            _ => 2.min(el - 1)..el,
        }
    }

    /// Pose, eye and lip.
    pub fn motion_factors(&self) -> usize {
        POSE_DIM + 1 + self.lip_dim
    }

    pub fn n_factors(&self) -> usize {
        self.identity_dim + self.motion_factors()
    }

    pub fn pixels(&self) -> usize {
        3 * self.image_size * self.image_size
    }
}

/// Ground-truth generative factors of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorState<S> {
    pub identity: Vec<S>,
    pub pose: [S; 3],
    pub eye: S,
    pub lip: Vec<S>,
}

impl<S: Scalar> FactorState<S> {
    pub fn zeros(dims: &WorldDims) -> Self {
        FactorState {
            identity: vec![S::zero(); dims.identity_dim],
            pose: [S::zero(); 3],
            eye: S::zero(),
            lip: vec![S::zero(); dims.lip_dim],
        }
    }

    /// `[identity | pose | eye | lip]`.
    pub fn to_vec(&self) -> Vec<S> {
        let mut v = self.identity.clone();
        v.extend_from_slice(&self.pose);
        v.push(self.eye);
        v.extend_from_slice(&self.lip);
        v
    }

    pub fn from_slice(dims: &WorldDims, v: &[S]) -> Self {
        let d = dims.identity_dim;
        FactorState {
            identity: v[..d].to_vec(),
            pose: [v[d], v[d + 1], v[d + 2]],
            eye: v[d + 3],
            lip: v[d + 4..d + 4 + dims.lip_dim].to_vec(),
        }
    }

    /// `[pose | eye | lip]`, the inputs of the landmark map.
    pub fn motion_vec(&self) -> Vec<S> {
        let mut v = self.pose.to_vec();
        v.push(self.eye);
        v.extend_from_slice(&self.lip);
        v
    }

    pub fn is_valid(&self) -> bool {
        self.pose.iter().all(|p| p.abs() <= S::one())
            && self.eye >= S::zero()
            && self.eye <= S::one()
            && self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> FactorState<T> {
        FactorState {
            identity: self.identity.iter().map(|v| T::c(v.f64())).collect(),
            pose: self.pose.map(|v| T::c(v.f64())),
            eye: T::c(self.eye.f64()),
            lip: self.lip.iter().map(|v| T::c(v.f64())).collect(),
        }
    }
}

/// The frozen world: fixed linear maps plus the seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams<S> {
    pub dims: WorldDims,
    pub seed: u64,
    /// `[1 x L*D]`
    pub style_bias: Tensor<S>,
    /// `[L*D x n_factors]`, columns ordered identity, pose, eye, lip.
    pub factor_map: Tensor<S>,
    /// Exact left inverse of `factor_map`, `[n_factors x L*D]`.
    pub left_inverse: Tensor<S>,
    /// Renderer, stored transposed: `frame = w * render_t`, `[L*D x 3HW]`.
    pub render_t: Tensor<S>,
    /// `[2K x (3 + 1 + d_lip)]`
    pub landmark_map: Tensor<S>,
    /// `[1 x 2K]`
    pub landmark_template: Tensor<S>,
    /// `[d_a_raw x d_lip]`, nonzero only on the lip-driving channels.
    pub audio_map: Tensor<S>,
    /// Inverse of the lip-driving block of `audio_map`, `[d_lip x d_lip]`.
    pub audio_unmix: Tensor<S>,
    /// Smallest singular value of the renderer restricted to the factor image.
    pub render_min_singular: f64,
}

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows, t.cols, &t.data)
}

fn from_na(m: &DMatrix<f64>) -> Tensor<f64> {
    let mut t = Tensor::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            t.set(r, c, m[(r, c)]);
        }
    }
    t
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect(),
    )
}

/// Build a world. Deterministic in `(cfg, seed)`.
pub fn build_world(cfg: &ModelConfig, seed: u64) -> Result<WorldParams<f64>> {
    let dims = WorldDims::from_config(cfg);
    if dims.identity_dim + dims.motion_factors() > dims.edit_len() {
        return Err(Error::Config(format!(
            "rank condition violated: {} factors exceed {} edit-layer channels",
            dims.n_factors(),
            dims.edit_len()
        )));
    }
    if dims.mouth_landmarks == 0 || dims.mouth_landmarks >= dims.landmarks {
        return Err(Error::Config("need at least one mouth and one face landmark".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ld, nf) = (dims.style_len(), dims.n_factors());
    let d_id = dims.identity_dim;

    let mut factor_map = Tensor::zeros(ld, nf);
    let id_std = IDENTITY_STYLE_GAIN / (d_id as f64).sqrt();
    for r in 0..ld {
        for c in 0..d_id {
            factor_map.set(r, c, rng.sample::<f64, _>(StandardNormal) * id_std);
        }
    }
    for k in 0..dims.motion_factors() {
        let (gain, group) = if k < POSE_DIM {
            (POSE_STYLE_GAIN, 0)
        } else if k == POSE_DIM {
            (EYE_STYLE_GAIN, 1)
        } else {
            (LIP_STYLE_GAIN, 2)
        };
        let layers = dims.motion_layers(group);
        // Keep the column norm independent of how many layers a group spans.
        let gain = gain * (dims.edit_layers as f64 / layers.len() as f64).sqrt();
        for r in layers.start * dims.style_dim..layers.end * dims.style_dim {
            factor_map.set(r, d_id + k, rng.sample::<f64, _>(StandardNormal) * gain);
        }
    }
    let style_bias = gaussian(&mut rng, 1, ld, BIAS_STYLE_STD);

    let f = to_na(&factor_map);
    let gram = f.transpose() * &f;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("factor map is rank deficient".into()))?;
    let left_inverse = chol.solve(&f.transpose());
    let sv = f.clone().singular_values();
    if sv.min() < 1e-8 * sv.max() {
        return Err(Error::Config("factor map is numerically rank deficient".into()));
    }

    // Renderer with R * bias = PIXEL_MEAN everywhere.
    let px = dims.pixels();
    let r0 = gaussian(&mut rng, px, ld, RENDER_GAIN / (ld as f64).sqrt());
    let r0 = to_na(&r0);
    let b = to_na(&style_bias).transpose();
    let target = DMatrix::from_element(px, 1, PIXEL_MEAN);
    let fix = (&target - &r0 * &b) * b.transpose() / b.norm_squared();
    let render = r0 + fix;
    let rf_sv = (&render * &f).singular_values();
    let render_min_singular = rf_sv.min();
    if render_min_singular <= 1e-10 {
        return Err(Error::Config("renderer is not injective on the factor image".into()));
    }

    let k = dims.landmarks;
    let km = dims.mouth_landmarks;
    let mut landmark_map = Tensor::zeros(2 * k, dims.motion_factors());
    for p in 0..k {
        let mouth = p >= k - km;
        for axis in 0..2 {
            let row = 2 * p + axis;
            for c in 0..dims.motion_factors() {
                let gain = if mouth {
                    if c > POSE_DIM {
                        LANDMARK_LIP_GAIN
                    } else {
                        0.0
                    }
                } else if c < POSE_DIM {
                    LANDMARK_POSE_GAIN
                } else if c == POSE_DIM {
                    LANDMARK_EYE_GAIN
                } else {
                    0.0
                };
                if gain > 0.0 {
                    landmark_map.set(row, c, rng.sample::<f64, _>(StandardNormal) * gain);
                }
            }
        }
    }
    let s = dims.image_size as f64;
    let mut landmark_template = Tensor::zeros(1, 2 * k);
    for p in 0..k {
        let (x, y) = if p >= k - km {
            let j = (p - (k - km)) as f64 / km as f64;
            let a = j * std::f64::consts::TAU;
            (s * (0.5 + 0.15 * a.cos()), s * (0.75 + 0.06 * a.sin()))
        } else {
            let j = p as f64 / (k - km) as f64;
            let a = j * std::f64::consts::TAU;
            (s * (0.5 + 0.35 * a.cos()), s * (0.4 + 0.3 * a.sin()))
        };
        landmark_template.data[2 * p] = x;
        landmark_template.data[2 * p + 1] = y;
    }

    let dl = dims.lip_dim;
    let mut mix = DMatrix::<f64>::identity(dl, dl);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for v in mix.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    let unmix = mix
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("audio mixing block is singular".into()))?;
    let mut audio_map = Tensor::zeros(dims.audio_raw_dim, dl);
    for r in 0..dl {
        for c in 0..dl {
            audio_map.set(r, c, mix[(r, c)]);
        }
    }

    Ok(WorldParams {
        dims,
        seed,
        style_bias,
        factor_map,
        left_inverse: from_na(&left_inverse),
        render_t: from_na(&render.transpose()),
        landmark_map,
        landmark_template,
        audio_map,
        audio_unmix: from_na(&unmix),
        render_min_singular,
    })
}

/// Result of projecting a style code onto the factor model.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion<S> {
    pub factors: FactorState<S>,
    /// Norm of the out-of-span part of the code.
    pub residual: S,
    /// `residual <= RESIDUAL_TOLERANCE`.
    pub in_span: bool,
}

/// One clip of the synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip<S> {
    pub seed: u64,
    pub styles: StyleSequence<S>,
    /// `[frames x 3HW]`, unclipped renderer output.
    pub frames: Tensor<S>,
    /// `[frames x d_a_raw]`
    pub audio_raw: Tensor<S>,
    pub factors: Vec<FactorState<S>>,
    /// `[frames x 2K]`, interleaved (x, y).
    pub landmarks: Tensor<S>,
}

impl<S: Scalar> SyntheticClip<S> {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// `[frames x n_factors]`.
    pub fn factor_matrix(&self) -> Tensor<S> {
        let rows: Vec<Vec<S>> = self.factors.iter().map(|f| f.to_vec()).collect();
        let cols = rows.first().map_or(0, |r| r.len());
        Tensor::from_vec(rows.len(), cols, rows.concat())
    }
}

impl<S: Scalar> WorldParams<S> {
    pub fn cast<T: Scalar>(&self) -> WorldParams<T> {
        WorldParams {
            dims: self.dims.clone(),
            seed: self.seed,
            style_bias: self.style_bias.cast(),
            factor_map: self.factor_map.cast(),
            left_inverse: self.left_inverse.cast(),
            render_t: self.render_t.cast(),
            landmark_map: self.landmark_map.cast(),
            landmark_template: self.landmark_template.cast(),
            audio_map: self.audio_map.cast(),
            audio_unmix: self.audio_unmix.cast(),
            render_min_singular: self.render_min_singular,
        }
    }

    /// `bias + factor_map * [identity; pose; eye; lip]`, reshaped to `[L x D]`.
    pub fn style_of(&self, f: &FactorState<S>) -> StylePlus<S> {
        let v = f.to_vec();
        let fm = &self.factor_map;
        let mut out = self.style_bias.data.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = fm.row(r);
            *o += row.iter().zip(&v).map(|(&a, &b)| a * b).sum::<S>();
        }
        StylePlus {
            codes: Tensor::from_vec(self.dims.layers, self.dims.style_dim, out),
        }
    }

    /// Least-squares factors of `w` plus the out-of-span residual norm.
    pub fn invert_style(&self, w: &StylePlus<S>) -> Result<Inversion<S>> {
        if w.flat().len() != self.dims.style_len() {
            return Err(Error::Shape("style code does not match the world".into()));
        }
        let centered: Vec<S> = w
            .flat()
            .iter()
            .zip(&self.style_bias.data)
            .map(|(&a, &b)| a - b)
            .collect();
        let li = &self.left_inverse;
        let fv: Vec<S> = (0..li.rows)
            .map(|r| li.row(r).iter().zip(&centered).map(|(&a, &b)| a * b).sum())
            .collect();
        let fm = &self.factor_map;
        let mut res2 = S::zero();
        for (r, &c) in centered.iter().enumerate() {
            let rec: S = fm.row(r).iter().zip(&fv).map(|(&a, &b)| a * b).sum();
            res2 += (c - rec) * (c - rec);
        }
        let residual = res2.sqrt();
        Ok(Inversion {
            factors: FactorState::from_slice(&self.dims, &fv),
            residual,
            in_span: residual.f64() <= RESIDUAL_TOLERANCE,
        })
    }

    /// Differentiable-path value of the renderer, `[1 x 3HW]`.
    pub fn render(&self, w: &StylePlus<S>) -> Tensor<S> {
        Tensor::row_vector(w.flat().to_vec()).matmul(&self.render_t)
    }

    /// Render several flattened codes at once, `[n x L*D] -> [n x 3HW]`.
    pub fn render_rows(&self, w: &Tensor<S>) -> Tensor<S> {
        w.matmul(&self.render_t)
    }

    /// Renderer as a graph op over `[n x L*D]` codes.
    pub fn render_graph(&self, g: &mut Graph<S>, w: Var) -> Var {
        let r = g.constant(self.render_t.clone());
        g.matmul(w, r)
    }

    /// Renderer over the first `edit_layers` codes only, the remaining layers
    /// contributing the constant `offset` rows.
    pub fn render_edit_graph(&self, g: &mut Graph<S>, w_edit: Var, offset: Var) -> Var {
        let r = g.constant(self.render_t.slice_rows(0, self.dims.edit_len()));
        let y = g.matmul(w_edit, r);
        g.add(y, offset)
    }

    /// `[K x 2]` landmark positions.
    pub fn landmarks_of(&self, f: &FactorState<S>) -> Tensor<S> {
        let v = f.motion_vec();
        let k = self.dims.landmarks;
        let mut out = Tensor::zeros(k, 2);
        for r in 0..2 * k {
            let off: S = self
                .landmark_map
                .row(r)
                .iter()
                .zip(&v)
                .map(|(&a, &b)| a * b)
                .sum();
            out.data[r] = self.landmark_template.data[r] + off;
        }
        out
    }

    pub fn mouth_range(&self) -> std::ops::Range<usize> {
        self.dims.landmarks - self.dims.mouth_landmarks..self.dims.landmarks
    }

    /// Lip state implied by raw audio: `tanh(gain * causal_mean(unmix * a_lip))`.
    pub fn lip_from_audio(&self, audio_raw: &Tensor<S>) -> Tensor<S> {
        let dl = self.dims.lip_dim;
        let n = audio_raw.rows;
        let mut src = Tensor::zeros(n, dl);
        for t in 0..n {
            let a = &audio_raw.row(t)[..dl];
            for i in 0..dl {
                src.data[t * dl + i] = self
                    .audio_unmix
                    .row(i)
                    .iter()
                    .zip(a)
                    .map(|(&u, &x)| u * x)
                    .sum();
            }
        }
        let mut lip = Tensor::zeros(n, dl);
        for t in 0..n {
            let lo = (t + 1).saturating_sub(LIP_CONTEXT);
            let cnt = S::c((t + 1 - lo) as f64);
            for i in 0..dl {
                let s: S = (lo..=t).map(|u| src.data[u * dl + i]).sum();
                lip.data[t * dl + i] = (S::c(LIP_GAIN) * s / cnt).tanh();
            }
        }
        lip
    }

    /// Factor trajectory and raw audio of a clip, without rendering.
    pub fn sample_trajectory(
        &self,
        frames: usize,
        seed: u64,
    ) -> Result<(Vec<FactorState<S>>, Tensor<S>)> {
        if frames < 3 {
            return Err(Error::Precondition("a clip needs at least 3 frames".into()));
        }
        let d = &self.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity: Vec<f64> = (0..d.identity_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();

        let stationary = POSE_NOISE / (1.0 - POSE_DECAY * POSE_DECAY).sqrt();
        let mut pose = [0.0f64; 3];
        for p in &mut pose {
            *p = (rng.sample::<f64, _>(StandardNormal) * stationary).clamp(-1.0, 1.0);
        }
        let hazard = blink_hazard(d.blink_rate, d.fps);
        let mut blink_pos: Option<usize> = None;
        let mut since_onset = BLINK_REFRACTORY;

        let innov = (1.0 - SPEECH_AR * SPEECH_AR).sqrt();
        let mut speech: Vec<f64> = (0..d.lip_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut audio = Tensor::<S>::zeros(frames, d.audio_raw_dim);

        let mut poses = Vec::with_capacity(frames);
        let mut eyes = Vec::with_capacity(frames);
        for t in 0..frames {
            if t > 0 {
                for p in &mut pose {
                    let e: f64 = rng.sample(StandardNormal);
                    *p = (POSE_DECAY * *p + POSE_NOISE * e).clamp(-1.0, 1.0);
                }
                for s in &mut speech {
                    let e: f64 = rng.sample(StandardNormal);
                    *s = SPEECH_AR * *s + innov * e;
                }
            }
            poses.push(pose);

            let u: f64 = rng.random();
            if blink_pos.is_none() && since_onset >= BLINK_REFRACTORY && u < hazard {
                blink_pos = Some(0);
                since_onset = 0;
            }
            let eye = match blink_pos {
                Some(i) => {
                    let v = BLINK_PROFILE[i];
                    blink_pos = if i + 1 < BLINK_PROFILE.len() {
                        Some(i + 1)
                    } else {
                        None
                    };
                    v
                }
                None => 1.0,
            };
            since_onset += 1;
            eyes.push(eye);

            let row = audio.row_mut(t);
            for c in 0..d.audio_raw_dim {
                row[c] = if c < d.lip_dim {
                    S::c((0..d.lip_dim).map(|k| self.audio_map.get(c, k).f64() * speech[k]).sum())
                } else {
                    S::c(rng.sample(StandardNormal))
                };
            }
        }
        let lips = self.lip_from_audio(&audio);
        let factors = (0..frames)
            .map(|t| FactorState {
                identity: identity.iter().map(|&v| S::c(v)).collect(),
                pose: poses[t].map(S::c),
                eye: S::c(eyes[t]),
                lip: lips.row(t).to_vec(),
            })
            .collect();
        Ok((factors, audio))
    }

    /// Sample a clip of `frames` frames. Deterministic in `(world, seed)`.
    pub fn sample_clip(&self, frames: usize, seed: u64) -> Result<SyntheticClip<S>> {
        let (factors, audio) = self.sample_trajectory(frames, seed)?;
        let d = &self.dims;
        let mut styles = Vec::with_capacity(frames);
        let mut landmarks = Tensor::zeros(frames, 2 * d.landmarks);
        for (t, f) in factors.iter().enumerate() {
            let w = self.style_of(f);
            landmarks
                .row_mut(t)
                .copy_from_slice(&self.landmarks_of(f).data);
            styles.push(w);
        }
        let styles = StyleSequence::new(styles, d.fps)?;
        let frames_t = self.render_rows(&styles.to_matrix());
        Ok(SyntheticClip {
            seed,
            styles,
            frames: frames_t,
            audio_raw: audio,
            factors,
            landmarks,
        })
    }
}

/// Per-frame onset probability outside the refractory period giving a mean
/// rate of `rate` blinks per second.
pub fn blink_hazard(rate: f64, fps: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    let mean_interval = fps / rate;
    let free = (mean_interval - BLINK_REFRACTORY as f64 + 1.0).max(1.0);
    1.0 / free
}

/// Display copy of rendered frames, clipped to `[0, 1]`.
pub fn clip_display<S: Scalar>(frames: &Tensor<S>) -> Tensor<S> {
    frames.map(|v| v.max(S::zero()).min(S::one()))
}
