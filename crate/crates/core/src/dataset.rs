//! On-disk synthetic corpus: one directory per clip plus a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_io::{read_tensor, write_tensor};
use crate::types::{StylePlus, StyleSequence};
use crate::world::{build_world, FactorState, SyntheticClip, WorldParams};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// SplitMix64 finalizer; decorrelates seeds derived from one base seed.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(base) ^ stream) ^ index)
}

pub fn world_seed(base: u64) -> u64 {
    derive_seed(base, 0, 0)
}

pub fn clip_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, 1, index as u64)
}

impl<S: Scalar> SyntheticClip<S> {
    pub fn cast<T: Scalar>(&self) -> SyntheticClip<T> {
        SyntheticClip {
            seed: self.seed,
            styles: StyleSequence {
                frames: self
                    .styles
                    .frames
                    .iter()
                    .map(|f| StylePlus {
                        codes: f.codes.cast(),
                    })
                    .collect(),
                frame_rate: self.styles.frame_rate,
            },
            frames: self.frames.cast(),
            audio_raw: self.audio_raw.cast(),
            factors: self.factors.iter().map(|f| f.cast()).collect(),
            landmarks: self.landmarks.cast(),
        }
    }
}

/// A world plus clips sampled from it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: ModelConfig,
    pub base_seed: u64,
    pub frames: usize,
    pub world: WorldParams<f64>,
    pub clips: Vec<SyntheticClip<f32>>,
}

/// Sample `clips` clips of `frames` frames, spreading the work over
/// `workers` threads. The result does not depend on `workers`.
pub fn synthesize(
    cfg: &ModelConfig,
    clips: usize,
    frames: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Corpus> {
    synthesize_range(cfg, 0..clips, frames, base_seed, workers)
}

/// Clips `range` of the stream under `base_seed`. Disjoint ranges give
/// disjoint clips from the same world.
pub fn synthesize_range(
    cfg: &ModelConfig,
    range: std::ops::Range<usize>,
    frames: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Corpus> {
    cfg.validate()?;
    let world = build_world(cfg, world_seed(base_seed))?;
    let out = sample_clips(&world, range.map(|i| clip_seed(base_seed, i)).collect(), frames, workers)?;
    Ok(Corpus {
        config: cfg.clone(),
        base_seed,
        frames,
        world,
        clips: out,
    })
}

pub fn sample_clips(
    world: &WorldParams<f64>,
    seeds: Vec<u64>,
    frames: usize,
    workers: usize,
) -> Result<Vec<SyntheticClip<f32>>> {
    let workers = workers.max(1).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<SyntheticClip<f32>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&seed| world.sample_clip(frames, seed).map(|c| c.cast()))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:03}")
}

pub fn write_clip<S: Scalar>(dir: &Path, world: &WorldParams<f64>, clip: &SyntheticClip<S>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let d = &world.dims;
    let t = clip.len();
    write_tensor(&dir.join("styles.bin"), &clip.styles.to_matrix(), &[t, d.layers, d.style_dim])?;
    write_tensor(
        &dir.join("frames.bin"),
        &clip.frames,
        &[t, 3, d.image_size, d.image_size],
    )?;
    write_tensor(&dir.join("audio.bin"), &clip.audio_raw, &[t, d.audio_raw_dim])?;
    write_tensor(&dir.join("factors.bin"), &clip.factor_matrix(), &[t, d.n_factors()])?;
    write_tensor(&dir.join("landmarks.bin"), &clip.landmarks, &[t, d.landmarks, 2])?;
    fs::write(dir.join("seed.txt"), format!("{}\n", clip.seed))?;
    Ok(())
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!("{name}: shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

/// Read one clip directory written by [`write_clip`].
pub fn read_clip<S: Scalar>(dir: &Path, world: &WorldParams<f64>) -> Result<SyntheticClip<S>> {
    let d = &world.dims;
    let (styles, ss) = read_tensor::<S>(&dir.join("styles.bin"))?;
    let t = ss.first().copied().unwrap_or(0);
    expect_shape("styles.bin", &ss, &[t, d.layers, d.style_dim])?;
    let (frames, fs_) = read_tensor::<S>(&dir.join("frames.bin"))?;
    expect_shape("frames.bin", &fs_, &[t, 3, d.image_size, d.image_size])?;
    let (audio_raw, as_) = read_tensor::<S>(&dir.join("audio.bin"))?;
    expect_shape("audio.bin", &as_, &[t, d.audio_raw_dim])?;
    let (factors, fa) = read_tensor::<S>(&dir.join("factors.bin"))?;
    expect_shape("factors.bin", &fa, &[t, d.n_factors()])?;
    let (landmarks, ls) = read_tensor::<S>(&dir.join("landmarks.bin"))?;
    expect_shape("landmarks.bin", &ls, &[t, d.landmarks, 2])?;
    let seed = fs::read_to_string(dir.join("seed.txt"))
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);
    let style_frames = (0..t)
        .map(|r| StylePlus::from_flat(d.layers, d.style_dim, styles.row(r).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticClip {
        seed,
        styles: StyleSequence::new(style_frames, d.fps)?,
        frames,
        audio_raw,
        factors: (0..t).map(|r| FactorState::from_slice(d, factors.row(r))).collect(),
        landmarks,
    })
}

/// Write the corpus: `config.txt`, `manifest.txt`, and one directory per clip.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    corpus.config.save(&dir.join(CONFIG_FILE))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# base_seed {}", corpus.base_seed);
    let _ = writeln!(manifest, "# world_seed {}", corpus.world.seed);
    let _ = writeln!(manifest, "# frames {}", corpus.frames);
    let _ = writeln!(manifest, "# config_hash {}", corpus.config.hash());
    for (i, clip) in corpus.clips.iter().enumerate() {
        let name = clip_dir_name(i);
        write_clip(&dir.join(&name), &corpus.world, clip)?;
        let _ = writeln!(manifest, "{name} {}", clip.seed);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_seed: u64,
    pub world_seed: u64,
    pub frames: usize,
    pub config_hash: String,
    pub clips: Vec<(String, u64)>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut m = Manifest {
        base_seed: 0,
        world_seed: 0,
        frames: 0,
        config_hash: String::new(),
        clips: Vec::new(),
    };
    let bad = |l: &str| Error::Format(format!("manifest line {l:?}"));
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            let (k, v) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
            match k {
                "base_seed" => m.base_seed = v.parse().map_err(|_| bad(line))?,
                "world_seed" => m.world_seed = v.parse().map_err(|_| bad(line))?,
                "frames" => m.frames = v.parse().map_err(|_| bad(line))?,
                "config_hash" => m.config_hash = v.to_string(),
                _ => {}
            }
            continue;
        }
        let (name, seed) = line.split_once(' ').ok_or_else(|| bad(line))?;
        m.clips.push((name.to_string(), seed.trim().parse().map_err(|_| bad(line))?));
    }
    Ok(m)
}

/// Locate the corpus root for a clip directory (its parent holding the manifest).
pub fn corpus_root(clip_dir: &Path) -> Result<PathBuf> {
    let parent = clip_dir
        .parent()
        .ok_or_else(|| Error::Precondition(format!("{} has no parent", clip_dir.display())))?;
    if parent.join(MANIFEST).exists() {
        Ok(parent.to_path_buf())
    } else {
        Err(Error::Precondition(format!(
            "no {MANIFEST} next to {}",
            clip_dir.display()
        )))
    }
}

/// Rebuild the world of a corpus directory from its config and manifest.
pub fn load_world(dir: &Path) -> Result<(ModelConfig, WorldParams<f64>, Manifest)> {
    let cfg = ModelConfig::load(&dir.join(CONFIG_FILE))?;
    let m = read_manifest(dir)?;
    if m.config_hash != cfg.hash() {
        return Err(Error::Format("corpus config does not match its manifest".into()));
    }
    let world = build_world(&cfg, m.world_seed)?;
    Ok((cfg, world, m))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let (config, world, m) = load_world(dir)?;
    let clips = m
        .clips
        .iter()
        .map(|(name, _)| read_clip(&dir.join(name), &world))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config,
        base_seed: m.base_seed,
        frames: m.frames,
        world,
        clips,
    })
}
