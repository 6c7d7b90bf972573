//! Model and training configuration with a plain `key = value` text format.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Audio front-end parameters of the full-scale setup. The synthetic world
/// replaces waveform processing, so these are informational only.
pub mod audio_frontend {
    pub const SAMPLE_RATE_HZ: u32 = 16_000;
    pub const FFT_SIZE: usize = 512;
    pub const HOP_SIZE: usize = 160;
    pub const WINDOW_SIZE: usize = 400;
    pub const MEL_BINS: usize = 80;
    pub const VIDEO_FPS: u32 = 25;
    /// Seconds of spectrogram consumed per video frame.
    pub const SEGMENT_SECONDS: f64 = 0.2;
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn format_value(&self) -> String;
}

macro_rules! impl_config_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

impl_config_value!(usize, u64, f64, bool);

impl ConfigValue for String {
    fn parse_value(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn format_value(&self) -> String {
        self.clone()
    }
}

macro_rules! config_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr, )*
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $( $field: $default, )* }
            }
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Set one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(
                        stringify!($field) => {
                            self.$field = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                                Error::Config(format!("invalid value {value:?} for key {key}"))
                            })?;
                            Ok(())
                        }
                    )*
                    _ => Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.format_value()), )*
                    _ => None,
                }
            }

            pub fn to_kv_string(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($field), self.$field.format_value()); )*
                out
            }
        }
    };
}

config_struct! {
    /// Every tunable of the model, the synthetic world, and training.
    pub struct ModelConfig {
        // style latent layout
        style_layers: usize = 8,
        edit_layers: usize = 4,
        style_dim: usize = 64,
        motion_dim: usize = 16,
        audio_dim: usize = 16,
        seq_len: usize = 64,
        window: usize = 15,
        sync_half_window: usize = 2,

        // synthetic world
        identity_dim: usize = 8,
        lip_dim: usize = 4,
        distractor_channels: usize = 8,
        image_size: usize = 16,
        landmarks: usize = 8,
        mouth_landmarks: usize = 4,
        fps: f64 = 25.0,
        blink_rate: f64 = 0.3,

        // audio encoder
        audio_context: usize = 3,
        audio_hidden: usize = 32,

        // posterior
        posterior_stem: usize = 16,
        posterior_stem_out: usize = 16,
        posterior_audio: usize = 16,
        posterior_hidden: usize = 64,

        // prior and flow
        prior_hidden: usize = 64,
        prior_audio: usize = 16,
        /// "z": the autoregressive base conditions on flow outputs; "m": on raw latents.
        prior_condition: String = "z".to_string(),
        flow_steps: usize = 4,
        flow_hidden: usize = 32,
        flow_scale_bound: f64 = 2.0,

        // smoothing / manipulation
        smooth_kernel: usize = 5,
        smooth_sigma: f64 = 1.0,
        conv_kernel: usize = 3,
        control_channels: usize = 128,
        gate_bias_init: f64 = 4.0,

        // sync discriminator
        sync_embed: usize = 32,
        sync_hidden: usize = 64,
        sync_conv_channels: usize = 8,
        tau_init: f64 = 0.07,
        sync_batch: usize = 32,
        sync_steps: usize = 4000,
        sync_lr: f64 = 1e-3,
        sync_shift_max: usize = 10,

        // perceptual extractor
        perceptual_channels: usize = 8,
        perceptual_gain: f64 = 1000.0,

        // objective and optimization
        lambda_1: f64 = 0.1,
        lambda_2: f64 = 0.1,
        lambda_3: f64 = 0.1,
        lambda_4: f64 = 0.1,
        use_sync_loss: bool = true,
        kl_warmup: bool = true,
        kl_warmup_frac: f64 = 0.1,
        learning_rate: f64 = 1e-3,
        batch_size: usize = 8,
        train_steps: usize = 3000,
        grad_clip: f64 = 5.0,
        corpus_clips: usize = 200,
        seed: u64 = 7,
    }
}

/// Keys that affect optimization or run length but not parameter shapes.
pub const RUN_KEYS: &[&str] = &[
    "seed",
    "learning_rate",
    "batch_size",
    "train_steps",
    "grad_clip",
    "corpus_clips",
    "sync_batch",
    "sync_steps",
    "sync_lr",
    "sync_shift_max",
    "lambda_1",
    "lambda_2",
    "lambda_3",
    "lambda_4",
    "use_sync_loss",
    "kl_warmup",
    "kl_warmup_frac",
];

/// Keys that determine the sync discriminator's parameters and inputs.
pub const SYNC_KEYS: &[&str] = &[
    "sync_half_window",
    "image_size",
    "lip_dim",
    "distractor_channels",
    "sync_conv_channels",
    "sync_hidden",
    "sync_embed",
];

impl ModelConfig {
    /// Full-scale dimensions (16 style layers of width 512, 8 edited) with
    /// the long-run learning rate.
    pub fn full_scale() -> Self {
        ModelConfig {
            learning_rate: 1e-4,
            style_layers: 16,
            edit_layers: 8,
            style_dim: 512,
            motion_dim: 32,
            audio_dim: 32,
            seq_len: 128,
            posterior_stem: 128,
            posterior_stem_out: 32,
            posterior_audio: 32,
            posterior_hidden: 256,
            prior_hidden: 256,
            prior_audio: 32,
            flow_hidden: 256,
            ..Self::default()
        }
    }

    pub fn sync_window(&self) -> usize {
        2 * self.sync_half_window + 1
    }

    pub fn audio_raw_dim(&self) -> usize {
        self.lip_dim + self.distractor_channels
    }

    pub fn pixels(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.style_layers == 0 || self.edit_layers == 0 || self.style_dim == 0 {
            return fail("style layout must be positive".into());
        }
        if self.style_layers < 2 * self.edit_layers {
            return fail(format!(
                "style_layers ({}) must be at least twice edit_layers ({})",
                self.style_layers, self.edit_layers
            ));
        }
        if self.window > self.seq_len {
            return fail("window must not exceed seq_len".into());
        }
        if self.sync_window() > self.window {
            return fail("sync window must fit inside the generation window".into());
        }
        for (k, v) in [
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
            ("lambda_4", self.lambda_4),
        ] {
            if !(v >= 0.0) {
                return fail(format!("{k} must be non-negative"));
            }
        }
        if self.motion_dim < 2 || !self.motion_dim.is_multiple_of(2) {
            return fail("motion_dim must be even and at least 2".into());
        }
        if self.smooth_kernel.is_multiple_of(2) || self.conv_kernel.is_multiple_of(2) {
            return fail("temporal kernels must have odd size".into());
        }
        if !self.image_size.is_multiple_of(4) || self.image_size < 8 {
            return fail("image_size must be a multiple of 4, at least 8".into());
        }
        if self.mouth_landmarks >= self.landmarks {
            return fail("mouth_landmarks must be fewer than landmarks".into());
        }
        if self.prior_condition != "z" && self.prior_condition != "m" {
            return fail("prior_condition must be \"z\" or \"m\"".into());
        }
        if !(self.tau_init >= 0.01 && self.tau_init <= 1.0) {
            return fail("tau_init must lie in [0.01, 1]".into());
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Keys absent from the
    /// text keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_kv_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }

    /// Hash over the listed keys only.
    pub fn hash_keys(&self, keys: &[&str]) -> String {
        let mut h = Sha256::new();
        for k in keys {
            h.update(format!("{k} = {}\n", self.get(k).unwrap_or_default()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Hash of everything that shapes model parameters, ignoring optimization
    /// and run-length settings, so checkpoints survive e.g. a new step count.
    pub fn architecture_hash(&self) -> String {
        let keys: Vec<&str> = Self::KEYS
            .iter()
            .copied()
            .filter(|k| !RUN_KEYS.contains(k))
            .collect();
        self.hash_keys(&keys)
    }

    /// Hash of the settings that shape the sync discriminator.
    pub fn sync_hash(&self) -> String {
        self.hash_keys(SYNC_KEYS)
    }
}
