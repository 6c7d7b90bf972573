//! Generation from a reference code in the two modes, frame export, and
//! factor-space evaluation of generated sequences.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{identity_error, lmd, lse_c, motion_stats, pearson, ssim, EvalReport};
use crate::model::TalkerModel;
use crate::scalar::Scalar;
use crate::sync::SyncEncoders;
use crate::tensor::Tensor;
use crate::types::{StylePlus, StyleSequence};
use crate::world::{clip_display, FactorState, WorldParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    MotionControllable,
    AudioDriven,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "motion-controllable" | "motion_controllable" => Ok(Mode::MotionControllable),
            "audio-driven" | "audio_driven" => Ok(Mode::AudioDriven),
            _ => Err(Error::Config(format!("unknown generation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationRequest<S> {
    pub reference: StylePlus<S>,
    /// Raw audio features `[T x d_raw]`; `T` is the output length.
    pub audio: Tensor<S>,
    pub mode: Mode,
    pub motion_source: Option<StyleSequence<S>>,
    pub seed: u64,
    /// Use the posterior mean instead of a draw.
    pub posterior_mean: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated<S> {
    /// `[T x L*D]`
    pub codes: Tensor<S>,
    /// `[T x 3HW]`, unclipped.
    pub frames: Tensor<S>,
    /// Latents per edited layer.
    pub latents: Vec<Tensor<S>>,
}

fn finish<S: Scalar>(
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    req: &GenerationRequest<S>,
    latents: Vec<Tensor<S>>,
) -> Result<Generated<S>> {
    let codes = model.decode(&req.reference, &req.audio, &latents)?;
    let frames = world.render_rows(&codes);
    Ok(Generated { codes, frames, latents })
}

/// Latents from the posterior over the motion source (truncated to the audio
/// length), then manipulation of the reference.
pub fn generate_motion_controllable<S: Scalar>(
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    req: &GenerationRequest<S>,
) -> Result<Generated<S>> {
    let src = req
        .motion_source
        .as_ref()
        .ok_or_else(|| Error::Precondition("motion-controllable generation needs a motion source".into()))?;
    let t = req.audio.rows;
    if src.len() < t {
        return Err(Error::Shape(format!(
            "motion source has {} frames, audio has {t}",
            src.len()
        )));
    }
    let styles = src.truncated(t).to_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let ms = model.posterior_latents(&styles, &req.audio, req.posterior_mean, &mut rng)?;
    finish(model, world, req, ms)
}

/// Latents sampled from the prior seeded by the reference code.
pub fn generate_audio_driven<S: Scalar>(
    model: &TalkerModel<S>,
    world: &WorldParams<S>,
    req: &GenerationRequest<S>,
) -> Result<Generated<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let ms = model.prior_latents(&req.reference, &req.audio, &mut rng);
    finish(model, world, req, ms)
}

pub fn generate<S: Scalar>(model: &TalkerModel<S>, world: &WorldParams<S>, req: &GenerationRequest<S>) -> Result<Generated<S>> {
    match (req.mode, req.motion_source.is_some()) {
        (Mode::MotionControllable, _) => generate_motion_controllable(model, world, req),
        (Mode::AudioDriven, false) => generate_audio_driven(model, world, req),
        (Mode::AudioDriven, true) => Err(Error::Precondition(
            "audio-driven generation takes no motion source".into(),
        )),
    }
}

/// 8-bit quantization of one display pixel.
pub fn to_u8<S: Scalar>(v: S) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `frames: [n x 3*size*size]` as `frame_00000.png ...` plus
/// `manifest.txt` listing them in order.
pub fn assemble_video<S: Scalar>(frames: &Tensor<S>, dir: &Path, size: usize) -> Result<()> {
    let plane = size * size;
    if frames.rows > 0 && frames.cols != 3 * plane {
        return Err(Error::Shape(format!("frames have {} pixels, expected {}", frames.cols, 3 * plane)));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for t in 0..frames.rows {
        let row = frames.row(t);
        let mut buf = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                buf.push(to_u8(row[c * plane + p]));
            }
        }
        let name = format!("frame_{t:05}.png");
        let img = image::RgbImage::from_raw(size as u32, size as u32, buf).expect("buffer matches size");
        img.save(dir.join(&name))
            .map_err(|e| Error::Io(std::io::Error::other(format!("{name}: {e}"))))?;
        let _ = writeln!(manifest, "{name}");
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Frames listed in `manifest.txt`, as values `k / 255`.
pub fn read_video<S: Scalar>(dir: &Path) -> Result<Tensor<S>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let names: Vec<&str> = manifest.lines().filter(|l| !l.is_empty()).collect();
    let mut rows = Vec::new();
    let mut cols = 0;
    for name in &names {
        let img = image::open(dir.join(name))
            .map_err(|e| Error::Format(format!("{name}: {e}")))?
            .to_rgb8();
        let plane = (img.width() * img.height()) as usize;
        cols = 3 * plane;
        let mut row = vec![S::zero(); cols];
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                row[c * plane + p] = S::c(px.0[c] as f64 / 255.0);
            }
        }
        rows.extend(row);
    }
    Ok(Tensor::from_vec(names.len(), cols, rows))
}

/// Per-frame factors of output codes by projection onto the factor model.
pub fn factors_of<S: Scalar>(world: &WorldParams<S>, codes: &Tensor<S>) -> Result<Vec<FactorState<S>>> {
    let (l, d) = (world.dims.layers, world.dims.style_dim);
    (0..codes.rows)
        .map(|t| {
            let w = StylePlus::from_flat(l, d, codes.row(t).to_vec())?;
            Ok(world.invert_style(&w)?.factors)
        })
        .collect()
}

/// Landmark tracks `[T x 2K]` of a factor sequence.
pub fn landmark_track<S: Scalar>(world: &WorldParams<S>, factors: &[FactorState<S>]) -> Tensor<S> {
    let k2 = 2 * world.dims.landmarks;
    let mut out = Tensor::zeros(factors.len(), k2);
    for (t, f) in factors.iter().enumerate() {
        out.row_mut(t).copy_from_slice(&world.landmarks_of(f).data);
    }
    out
}

fn column<S: Scalar>(factors: &[FactorState<S>], pick: impl Fn(&FactorState<S>) -> S) -> Vec<f64> {
    factors.iter().map(|f| pick(f).f64()).collect()
}

/// Mean Pearson correlation over the three pose axes.
pub fn pose_correlation<S: Scalar>(a: &[FactorState<S>], b: &[FactorState<S>]) -> f64 {
    (0..3)
        .map(|k| pearson(&column(a, |f| f.pose[k]), &column(b, |f| f.pose[k])))
        .sum::<f64>()
        / 3.0
}

/// Mean Pearson correlation between generated lip factors and a reference
/// lip track `[T x lip_dim]`.
pub fn lip_correlation<S: Scalar>(a: &[FactorState<S>], lip: &Tensor<S>) -> f64 {
    let dl = lip.cols;
    if dl == 0 {
        return 0.0;
    }
    (0..dl)
        .map(|k| {
            let y: Vec<f64> = (0..lip.rows).map(|t| lip.get(t, k).f64()).collect();
            pearson(&column(a, |f| f.lip[k]), &y)
        })
        .sum::<f64>()
        / dl as f64
}

/// Mean absolute correlation between every pose axis and every dimension of
/// the audio-implied lip track: how much speech content leaks into head
/// motion.
pub fn pose_lip_leakage<S: Scalar>(a: &[FactorState<S>], lip: &Tensor<S>) -> f64 {
    let dl = lip.cols;
    if dl == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for p in 0..3 {
        let x = column(a, |f| f.pose[p]);
        for k in 0..dl {
            let y: Vec<f64> = (0..lip.rows).map(|t| lip.get(t, k).f64()).collect();
            s += pearson(&x, &y).abs();
        }
    }
    s / (3 * dl) as f64
}

/// Ground truth of one evaluation: frames, landmarks and the identity that
/// generation should preserve.
pub struct EvalTarget<'a, S> {
    pub frames: &'a Tensor<S>,
    pub landmarks: &'a Tensor<S>,
    pub identity: &'a [S],
}

/// Metrics of a generated sequence against its target.
pub fn evaluate<S: Scalar>(
    world: &WorldParams<S>,
    sync: &SyncEncoders<S>,
    generated: &Generated<S>,
    audio: &Tensor<S>,
    target: &EvalTarget<S>,
) -> Result<EvalReport> {
    let t = generated.frames.rows;
    if target.frames.rows < t || target.landmarks.rows < t {
        return Err(Error::Shape("target is shorter than the generation".into()));
    }
    let factors = factors_of(world, &generated.codes)?;
    let lm = landmark_track(world, &factors);
    let gt_lm = target.landmarks.slice_rows(0, t);
    let size = world.dims.image_size;
    let (blink_rate, pose_variance) = motion_stats(&factors, world.dims.fps);
    Ok(EvalReport {
        ssim: ssim(
            &clip_display(&generated.frames),
            &clip_display(&target.frames.slice_rows(0, t)),
            size,
        )?,
        lmd: lmd(&lm, &gt_lm, 0..world.dims.landmarks)?,
        lmd_m: lmd(&lm, &gt_lm, world.mouth_range())?,
        lse_c: lse_c(sync, &generated.frames, audio)?,
        blink_rate,
        pose_variance,
        identity_error: identity_error(&factors, target.identity),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::world::build_world;

    fn tiny() -> (ModelConfig, TalkerModel<f64>, WorldParams<f64>) {
        let cfg = crate::training::run_tests::tiny_cfg();
        let model = TalkerModel::new(&cfg, 3).unwrap();
        let world = build_world(&cfg, 4).unwrap();
        (cfg, model, world)
    }

    fn request(world: &WorldParams<f64>, t: usize, mode: Mode, seed: u64) -> GenerationRequest<f64> {
        let clip = world.sample_clip(t + 3, 9).unwrap();
        GenerationRequest {
            reference: clip.styles.frames[0].clone(),
            audio: clip.audio_raw.slice_rows(0, t),
            mode,
            motion_source: (mode == Mode::MotionControllable).then(|| clip.styles.clone()),
            seed,
            posterior_mean: false,
        }
    }

    #[test]
    fn generation_is_seeded_and_keeps_fine_layers() {
        let (cfg, model, world) = tiny();
        for mode in [Mode::MotionControllable, Mode::AudioDriven] {
            let req = request(&world, 12, mode, 1);
            let a = generate(&model, &world, &req).unwrap();
            assert_eq!(a, generate(&model, &world, &req).unwrap());
            assert_eq!(a.frames.rows, 12);
            let fine = cfg.edit_layers * cfg.style_dim;
            for t in 0..12 {
                assert_eq!(&a.codes.row(t)[fine..], &req.reference.flat()[fine..]);
            }
        }
        let b = generate(&model, &world, &request(&world, 12, Mode::AudioDriven, 2)).unwrap();
        let a = generate(&model, &world, &request(&world, 12, Mode::AudioDriven, 1)).unwrap();
        assert_ne!(a.latents, b.latents);
    }

    #[test]
    fn modes_share_everything_but_the_latents() {
        let (_, model, world) = tiny();
        let mc = request(&world, 10, Mode::MotionControllable, 1);
        let ad = request(&world, 10, Mode::AudioDriven, 5);
        let g = generate(&model, &world, &mc).unwrap();
        let via_ad = finish(&model, &world, &ad, g.latents.clone()).unwrap();
        assert_eq!(g.frames, via_ad.frames);
    }

    #[test]
    fn length_rules() {
        let (_, model, world) = tiny();
        let mut req = request(&world, 10, Mode::MotionControllable, 1);
        req.motion_source = Some(req.motion_source.unwrap().truncated(9));
        assert!(matches!(generate(&model, &world, &req), Err(Error::Shape(_))));
        req.motion_source = None;
        assert!(generate(&model, &world, &req).is_err());
        let mut ad = request(&world, 10, Mode::AudioDriven, 1);
        ad.audio = Tensor::zeros(0, ad.audio.cols);
        let g = generate(&model, &world, &ad).unwrap();
        assert_eq!(g.frames.rows, 0);
    }

    #[test]
    fn video_round_trip() {
        let (_, model, world) = tiny();
        let g = generate(&model, &world, &request(&world, 4, Mode::AudioDriven, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assemble_video(&g.frames, dir.path(), 16).unwrap();
        let m = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(m.lines().count(), 4);
        let back: Tensor<f64> = read_video(dir.path()).unwrap();
        let q = g.frames.map(|v| to_u8(v) as f64 / 255.0);
        assert_eq!(back, q);
        let empty = dir.path().join("empty");
        assemble_video(&Tensor::<f64>::zeros(0, 768), &empty, 16).unwrap();
        assert_eq!(std::fs::read_to_string(empty.join("manifest.txt")).unwrap(), "");
        assert_eq!(read_video::<f64>(&empty).unwrap().rows, 0);
    }

    #[test]
    fn factor_recovery_of_ground_truth() {
        let (_, _, world) = tiny();
        let clip = world.sample_clip(30, 2).unwrap();
        let f = factors_of(&world, &clip.styles.to_matrix()).unwrap();
        for (a, b) in f.iter().zip(&clip.factors) {
            for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!((pose_correlation(&f, &clip.factors) - 1.0).abs() < 1e-9);
        let lm = landmark_track(&world, &f);
        assert!(lmd(&lm, &clip.landmarks, 0..world.dims.landmarks).unwrap() < 1e-9);
        let lip = world.lip_from_audio(&clip.audio_raw);
        assert!(lip_correlation(&clip.factors, &lip) > 0.99);
    }
}
