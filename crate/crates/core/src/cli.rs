//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::dataset::{corpus_root, load_world, read_clip, read_corpus, synthesize_range, write_corpus};
use crate::error::Error;
use crate::evaluation::{audio_driven, disentanglement, reconstruction, AudioDriven, Reconstruction};
use crate::inference::{assemble_video, evaluate, generate, EvalTarget, GenerationRequest, Mode};
use crate::metrics::lse_c;
use crate::model::TalkerModel;
use crate::sync::{pretrain_sync, retrieval_accuracy, SyncEncoders};
use crate::tensor_io::{write_tensor, Archive};
use crate::training::{TrainState, METRICS_HEADER};
use crate::world::{SyntheticClip, WorldDims, WorldParams};

pub const SEED_ENV: &str = "LATENT_TALKER_SEED";
pub const RUN_FILE: &str = "run.txt";
pub const SYNC_FILE: &str = "sync.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.bin";

#[derive(Parser, Debug)]
#[command(name = "latent-talker", version, about = "Talking-head motion generation in a style latent space")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed. The LATENT_TALKER_SEED environment variable takes precedence.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Threads used for data synthesis.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a corpus of clips.
    MakeData {
        #[arg(long)]
        clips: Option<usize>,
        /// Index of the first clip. Corpora from the same seed share one
        /// world, so a later range gives held-out clips.
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and freeze the lip-sync discriminator.
    PretrainSync {
        #[arg(long)]
        data: PathBuf,
        /// Held-out corpus for a retrieval report.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sequence model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Frozen discriminator written by pretrain-sync.
        #[arg(long)]
        sync: Option<PathBuf>,
        #[arg(long)]
        no_sync_loss: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a video from a reference clip and driving audio.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Clip whose first frame is the reference.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Clip providing the audio.
        #[arg(long)]
        audio: PathBuf,
        /// Clip providing motion (motion-controllable mode).
        #[arg(long)]
        motion: Option<PathBuf>,
        /// Ground-truth clip; writes an evaluation report.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        sync: Option<PathBuf>,
        #[arg(long)]
        posterior_mean: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a held-out corpus.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sync: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ablated variant and compare it with the full model.
    Ablate {
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        sync: PathBuf,
        /// Trained full model; trained here when absent.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    MotionControllable,
    AudioDriven,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoFlow,
    NoSync,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NoFlow => "no-flow",
            Variant::NoSync => "no-sync",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Variant::NoFlow => cfg.flow_steps = 0,
            Variant::NoSync => cfg.use_sync_loss = false,
        }
    }
}

/// Failure of one invocation, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `argv` and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli, std::env::var(SEED_ENV).ok().as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Seed precedence: environment, then flag, then configuration.
pub fn resolve_seed(env: Option<&str>, flag: Option<u64>, cfg: &ModelConfig) -> CliResult<u64> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(flag.unwrap_or(cfg.seed)),
    }
}

/// `base`, then the config file, then `--set` pairs.
pub fn layered_config(base: ModelConfig, common: &Common) -> CliResult<ModelConfig> {
    let mut cfg = base;
    if let Some(p) = &common.config {
        let text = fs::read_to_string(p)?;
        cfg.apply_kv_str(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn validated(cfg: ModelConfig) -> CliResult<ModelConfig> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 over the relative names and bytes of every input file.
pub fn content_hash(inputs: &[&Path]) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for root in inputs {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            let bytes = fs::read(&f)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn write_run_file(out: &Path, command: &str, cfg: &ModelConfig, seed: u64, inputs: &[&Path]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let mut s = String::new();
    let _ = writeln!(s, "# command = {command}");
    let _ = writeln!(s, "# seed = {seed}");
    let _ = writeln!(s, "# input_hash = {}", content_hash(inputs)?);
    s.push_str(&cfg.to_kv_string());
    fs::write(out.join(RUN_FILE), s)?;
    Ok(())
}

fn check_world(cfg: &ModelConfig, world: &WorldParams<f64>) -> CliResult<()> {
    if WorldDims::from_config(cfg) != world.dims {
        return Err(CliError::Usage(
            "configuration changes the synthetic world of the corpus".into(),
        ));
    }
    Ok(())
}

fn load_sync(path: &Path, cfg: &ModelConfig) -> CliResult<SyncEncoders<f32>> {
    let mut s = SyncEncoders::<f32>::load(path, cfg)?;
    s.freeze();
    Ok(s)
}

/// A model archive with its configuration and the seed of the world it was
/// trained on.
pub struct LoadedModel {
    pub cfg: ModelConfig,
    pub model: TalkerModel<f32>,
    pub world_seed: u64,
}

impl LoadedModel {
    fn check_world(&self, world: &WorldParams<f64>) -> CliResult<()> {
        check_world(&self.cfg, world)?;
        if self.world_seed != world.seed {
            return Err(CliError::Usage("model was trained on a different world".into()));
        }
        Ok(())
    }
}

/// Model and its configuration from a model or checkpoint archive.
pub fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let a = Archive::<f32>::load(path)?;
    let cfg = ModelConfig::from_kv_str(a.meta("config")?)?;
    let model = TalkerModel::from_archive(&a, &cfg)?;
    let world_seed = a
        .meta("world_seed")?
        .parse()
        .map_err(|_| Error::Format("bad world_seed".into()))?;
    Ok(LoadedModel { cfg, model, world_seed })
}

fn clips_f32(dir: &Path) -> CliResult<(ModelConfig, WorldParams<f64>, Vec<SyntheticClip<f32>>)> {
    let c = read_corpus(dir)?;
    Ok((c.config, c.world, c.clips))
}

pub fn execute(cli: &Cli, env_seed: Option<&str>) -> CliResult<()> {
    let common = &cli.common;
    match &cli.command {
        Command::MakeData {
            clips,
            first,
            frames,
            out,
        } => {
            let mut cfg = layered_config(ModelConfig::default(), common)?;
            if let Some(n) = clips {
                cfg.corpus_clips = *n;
            }
            let seed = resolve_seed(env_seed, common.seed, &cfg)?;
            cfg.seed = seed;
            let cfg = validated(cfg)?;
            let frames = frames.unwrap_or(cfg.seq_len);
            let corpus = synthesize_range(&cfg, *first..*first + cfg.corpus_clips, frames, seed, common.workers)?;
            write_corpus(out, &corpus)?;
            write_run_file(out, "make-data", &cfg, seed, &[])?;
            Ok(())
        }
        Command::PretrainSync {
            data,
            eval_data,
            steps,
            out,
        } => {
            let (base, world, clips) = clips_f32(data)?;
            let mut cfg = layered_config(base, common)?;
            if let Some(s) = steps {
                cfg.sync_steps = *s;
            }
            let seed = resolve_seed(env_seed, common.seed, &cfg)?;
            cfg.seed = seed;
            let cfg = validated(cfg)?;
            check_world(&cfg, &world)?;
            let mut inputs: Vec<&Path> = vec![data];
            if let Some(e) = eval_data {
                inputs.push(e);
            }
            write_run_file(out, "pretrain-sync", &cfg, seed, &inputs)?;
            let trained = pretrain_sync(&clips, &cfg, seed)?;
            trained.encoders.save(&out.join(SYNC_FILE), &cfg)?;
            let mut log = String::from("step,loss\n");
            for (i, l) in trained.losses.iter().enumerate() {
                let _ = writeln!(log, "{i},{l}");
            }
            fs::write(out.join("sync_losses.csv"), log)?;
            if let Some(e) = eval_data {
                let (_, _, held) = clips_f32(e)?;
                let enc = &trained.encoders;
                let acc = retrieval_accuracy(enc, &held, 32, 20, seed)?;
                let shift = 8;
                let mut wins = 0;
                for c in &held {
                    let n = c.len().saturating_sub(shift);
                    let aligned = lse_c(enc, &c.frames, &c.audio_raw)?;
                    let shifted = lse_c(enc, &c.frames.slice_rows(0, n), &c.audio_raw.slice_rows(shift, n))?;
                    wins += usize::from(aligned > shifted);
                }
                fs::write(
                    out.join("sync_report.txt"),
                    format!(
                        "retrieval_top1 = {acc}\nlse_c_shift8_wins = {}\n",
                        wins as f64 / held.len().max(1) as f64
                    ),
                )?;
            }
            Ok(())
        }
        Command::Train {
            data,
            sync,
            no_sync_loss,
            steps,
            resume,
            checkpoint_every,
            out,
        } => {
            let (base, world, clips) = clips_f32(data)?;
            let mut cfg = layered_config(base, common)?;
            if *no_sync_loss {
                cfg.use_sync_loss = false;
            }
            if let Some(s) = steps {
                cfg.train_steps = *s;
            }
            let seed = resolve_seed(env_seed, common.seed, &cfg)?;
            cfg.seed = seed;
            let cfg = validated(cfg)?;
            check_world(&cfg, &world)?;
            if cfg.use_sync_loss && sync.is_none() {
                return Err(CliError::Usage(
                    "train needs --sync <frozen checkpoint> unless --no-sync-loss is given".into(),
                ));
            }
            let mut inputs: Vec<&Path> = vec![data];
            if let Some(s) = sync.as_deref().filter(|_| cfg.use_sync_loss) {
                inputs.push(s);
            }
            if let Some(r) = resume {
                inputs.push(r);
            }
            write_run_file(out, "train", &cfg, seed, &inputs)?;
            train_model(&cfg, &world, &clips, sync.as_deref(), resume.as_deref(), *checkpoint_every, seed, out)?;
            Ok(())
        }
        Command::Generate {
            model,
            mode,
            reference,
            audio,
            motion,
            gt,
            sync,
            posterior_mean,
            out,
        } => {
            let loaded = load_model(model)?;
            let seed = resolve_seed(env_seed, common.seed, &loaded.cfg)?;
            let root = corpus_root(reference)?;
            let (_, world, _) = load_world(&root)?;
            loaded.check_world(&world)?;
            let LoadedModel { cfg, model: net, .. } = loaded;
            let read = |p: &Path| -> CliResult<SyntheticClip<f32>> { Ok(read_clip(p, &world)?) };
            let ref_clip = read(reference)?;
            let audio_clip = read(audio)?;
            let mode = match mode {
                ModeArg::MotionControllable => Mode::MotionControllable,
                ModeArg::AudioDriven => Mode::AudioDriven,
            };
            let motion_source = match (mode, motion) {
                (Mode::MotionControllable, Some(p)) => Some(read(p)?.styles),
                (Mode::MotionControllable, None) => {
                    return Err(CliError::Usage("motion-controllable mode needs --motion".into()))
                }
                (Mode::AudioDriven, Some(_)) => {
                    return Err(CliError::Usage("audio-driven mode takes no --motion".into()))
                }
                (Mode::AudioDriven, None) => None,
            };
            if gt.is_some() && sync.is_none() {
                return Err(CliError::Usage("--gt needs --sync for the sync confidence".into()));
            }
            let mut inputs: Vec<&Path> = vec![model, reference, audio];
            inputs.extend(motion.as_deref());
            inputs.extend(gt.as_deref());
            inputs.extend(sync.as_deref());
            write_run_file(out, "generate", &cfg, seed, &inputs)?;
            let req = GenerationRequest {
                reference: ref_clip.styles.frames[0].clone(),
                audio: audio_clip.audio_raw.clone(),
                mode,
                motion_source,
                seed,
                posterior_mean: *posterior_mean,
            };
            let world32 = world.cast::<f32>();
            let g = generate(&net, &world32, &req)?;
            assemble_video(&g.frames, &out.join("frames"), cfg.image_size)?;
            write_tensor(&out.join("codes.bin"), &g.codes, &[g.codes.rows, cfg.style_layers, cfg.style_dim])?;
            if let (Some(gt), Some(s)) = (gt, sync) {
                let enc = load_sync(s, &cfg)?;
                let gt_clip = read(gt)?;
                let target = EvalTarget {
                    frames: &gt_clip.frames,
                    landmarks: &gt_clip.landmarks,
                    identity: &ref_clip.factors[0].identity,
                };
                let report = evaluate(&world32, &enc, &g, &req.audio, &target)?;
                fs::write(out.join("report.txt"), report.to_kv_string())?;
            }
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            sync,
            samples,
            out,
        } => {
            let loaded = load_model(model)?;
            let seed = resolve_seed(env_seed, common.seed, &loaded.cfg)?;
            let (_, world, clips) = clips_f32(data)?;
            loaded.check_world(&world)?;
            let LoadedModel { cfg, model: net, .. } = loaded;
            write_run_file(out, "evaluate", &cfg, seed, &[model, data, sync])?;
            let enc = load_sync(sync, &cfg)?;
            let ev = evaluate_model(&net, &world, &enc, &clips, seed, *samples)?;
            ev.write(out)?;
            Ok(())
        }
        Command::Ablate {
            variant,
            data,
            eval_data,
            sync,
            baseline,
            steps,
            samples,
            out,
        } => {
            let (base, world, clips) = clips_f32(data)?;
            let mut cfg = layered_config(base, common)?;
            if let Some(s) = steps {
                cfg.train_steps = *s;
            }
            let seed = resolve_seed(env_seed, common.seed, &cfg)?;
            cfg.seed = seed;
            let cfg = validated(cfg)?;
            check_world(&cfg, &world)?;
            let mut inputs: Vec<&Path> = vec![data, eval_data, sync];
            inputs.extend(baseline.as_deref());
            write_run_file(out, "ablate", &cfg, seed, &inputs)?;
            let enc = load_sync(sync, &cfg)?;
            let (_, eval_world, held) = clips_f32(eval_data)?;
            if eval_world.dims != world.dims || eval_world.seed != world.seed {
                return Err(CliError::Usage("evaluation corpus has a different world".into()));
            }
            let full = match baseline {
                Some(p) => {
                    let loaded = load_model(p)?;
                    loaded.check_world(&world)?;
                    loaded.model
                }
                None => {
                    let dir = out.join("full");
                    fs::create_dir_all(&dir)?;
                    train_model(&cfg, &world, &clips, Some(sync), None, 0, seed, &dir)?
                }
            };
            let mut vcfg = cfg.clone();
            variant.apply(&mut vcfg);
            let dir = out.join(variant.name());
            fs::create_dir_all(&dir)?;
            let ablated = train_model(&vcfg, &world, &clips, Some(sync), None, 0, seed, &dir)?;
            let a = evaluate_model(&full, &eval_world, &enc, &held, seed, *samples)?;
            let b = evaluate_model(&ablated, &eval_world, &enc, &held, seed, *samples)?;
            let mut csv = format!("model,{},{}\n", Evaluation::csv_header(), AudioDriven::csv_header());
            let _ = writeln!(csv, "full,{},{}", a.csv_row(), a.audio.csv_row());
            let _ = writeln!(csv, "{},{},{}", variant.name(), b.csv_row(), b.audio.csv_row());
            fs::write(out.join("comparison.csv"), csv)?;
            Ok(())
        }
    }
}

/// Train from scratch (or from `resume`) to `cfg.train_steps`, writing the
/// metrics stream, periodic checkpoints and the final model into `out`.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    cfg: &ModelConfig,
    world: &WorldParams<f64>,
    clips: &[SyntheticClip<f32>],
    sync: Option<&Path>,
    resume: Option<&Path>,
    checkpoint_every: u64,
    seed: u64,
    out: &Path,
) -> CliResult<TalkerModel<f32>> {
    fs::create_dir_all(out)?;
    let enc = match (cfg.use_sync_loss, sync) {
        (true, Some(p)) => Some(load_sync(p, cfg)?),
        (true, None) => return Err(CliError::Usage("the sync loss needs a frozen sync checkpoint".into())),
        (false, _) => None,
    };
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::<f32>::load(p, cfg)?;
            if s.world_seed != world.seed {
                return Err(CliError::Usage("checkpoint was trained on a different world".into()));
            }
            s
        }
        None => TrainState::new(cfg, world, enc, seed)?,
    };
    let metrics = out.join("metrics.csv");
    let mut log = if resume.is_some() && metrics.exists() {
        fs::OpenOptions::new().append(true).open(&metrics)?
    } else {
        let mut f = fs::File::create(&metrics)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    state.train(clips, cfg.train_steps as u64, &mut log, Some((&ckpt, checkpoint_every)))?;
    let mut archive = state.model.to_archive();
    archive.set_meta("world_seed", world.seed);
    archive.save(&out.join(MODEL_FILE))?;
    Ok(state.model)
}

/// Results of the three held-out suites.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reconstruction: Reconstruction,
    pub disentanglement: crate::evaluation::Disentanglement,
    pub audio: AudioDriven,
}

impl Evaluation {
    pub fn csv_header() -> String {
        "recon_factor_rmse_max,recon_ssim,recon_lmd_m,recon_identity_error,dis_identity_error,dis_pose_corr_source,dis_pose_corr_audio_clip,dis_lip_corr_audio".into()
    }

    pub fn csv_row(&self) -> String {
        let r = &self.reconstruction;
        let d = &self.disentanglement;
        format!(
            "{},{},{},{},{},{},{},{}",
            r.factor_rmse.iter().cloned().fold(0.0, f64::max),
            r.report.ssim,
            r.report.lmd_m,
            r.report.identity_error,
            d.identity_error,
            d.pose_corr_source,
            d.pose_corr_audio_clip,
            d.lip_corr_audio
        )
    }

    pub fn write(&self, out: &Path) -> CliResult<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), self.audio.report.to_kv_string())?;
        let r = &self.reconstruction;
        let mut s = String::new();
        let rmse: Vec<String> = r.factor_rmse.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "factor_rmse = {}", rmse.join(" "));
        s.push_str(&r.report.to_kv_string());
        fs::write(out.join("reconstruction.txt"), s)?;
        let d = &self.disentanglement;
        fs::write(
            out.join("disentanglement.txt"),
            format!(
                "identity_error = {}\npose_corr_source = {}\npose_corr_audio_clip = {}\nlip_corr_audio = {}\n",
                d.identity_error, d.pose_corr_source, d.pose_corr_audio_clip, d.lip_corr_audio
            ),
        )?;
        fs::write(
            out.join("audio_driven.csv"),
            format!("{}\n{}\n", AudioDriven::csv_header(), self.audio.csv_row()),
        )?;
        Ok(())
    }
}

pub fn evaluate_model(
    model: &TalkerModel<f32>,
    world: &WorldParams<f64>,
    sync: &SyncEncoders<f32>,
    clips: &[SyntheticClip<f32>],
    seed: u64,
    samples: usize,
) -> CliResult<Evaluation> {
    let w = world.cast::<f32>();
    Ok(Evaluation {
        reconstruction: reconstruction(model, &w, sync, clips, seed, false)?,
        disentanglement: disentanglement(model, &w, clips, seed, false)?,
        audio: audio_driven(model, &w, sync, clips, seed, samples)?,
    })
}
