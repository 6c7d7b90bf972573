//! Shape-checked containers for style codes, audio features, and motion latents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-layer style codes of one frame, `[layers x dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePlus<S> {
    pub codes: Tensor<S>,
}

impl<S: Scalar> StylePlus<S> {
    pub fn new(codes: Tensor<S>) -> Result<Self> {
        if codes.rows == 0 || codes.cols == 0 {
            return Err(Error::Shape("style code needs positive layers and dim".into()));
        }
        if !codes.all_finite() {
            return Err(Error::Domain("non-finite style code".into()));
        }
        Ok(StylePlus { codes })
    }

    pub fn from_flat(layers: usize, dim: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != layers * dim {
            return Err(Error::Shape(format!(
                "expected {} values for a {layers}x{dim} style code, got {}",
                layers * dim,
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(layers, dim, data))
    }

    pub fn layers(&self) -> usize {
        self.codes.rows
    }

    pub fn dim(&self) -> usize {
        self.codes.cols
    }

    pub fn layer(&self, i: usize) -> &[S] {
        self.codes.row(i)
    }

    pub fn flat(&self) -> &[S] {
        &self.codes.data
    }
}

/// Style codes of consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSequence<S> {
    pub frames: Vec<StylePlus<S>>,
    pub frame_rate: f64,
}

impl<S: Scalar> StyleSequence<S> {
    pub fn new(frames: Vec<StylePlus<S>>, frame_rate: f64) -> Result<Self> {
        if let Some(first) = frames.first() {
            let shape = first.codes.shape();
            if frames.iter().any(|f| f.codes.shape() != shape) {
                return Err(Error::Shape("style frames differ in shape".into()));
            }
        }
        Ok(StyleSequence { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// One style layer over time, `[frames x dim]`.
    pub fn layer_track(&self, layer: usize) -> Tensor<S> {
        let dim = self.frames.first().map_or(0, |f| f.dim());
        let mut out = Tensor::zeros(self.frames.len(), dim);
        for (t, f) in self.frames.iter().enumerate() {
            out.row_mut(t).copy_from_slice(f.layer(layer));
        }
        out
    }

    pub fn truncated(&self, len: usize) -> Self {
        StyleSequence {
            frames: self.frames[..len.min(self.frames.len())].to_vec(),
            frame_rate: self.frame_rate,
        }
    }

    /// Flattened `[frames x layers*dim]`.
    pub fn to_matrix(&self) -> Tensor<S> {
        let width = self.frames.first().map_or(0, |f| f.codes.len());
        let mut out = Tensor::zeros(self.frames.len(), width);
        for (t, f) in self.frames.iter().enumerate() {
            out.row_mut(t).copy_from_slice(f.flat());
        }
        out
    }
}

/// Per-frame audio features, `[frames x d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence<S> {
    pub features: Tensor<S>,
}

impl<S: Scalar> AudioFeatureSequence<S> {
    pub fn new(features: Tensor<S>) -> Result<Self> {
        if !features.all_finite() {
            return Err(Error::Domain("non-finite audio features".into()));
        }
        Ok(AudioFeatureSequence { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    pub fn check_pairs(&self, styles: &StyleSequence<S>) -> Result<()> {
        if self.len() != styles.len() {
            return Err(Error::Shape(format!(
                "audio has {} frames but styles have {}",
                self.len(),
                styles.len()
            )));
        }
        Ok(())
    }
}

/// Per-frame motion latents, `[frames x d_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionLatentSequence<S> {
    pub latents: Tensor<S>,
}

impl<S: Scalar> MotionLatentSequence<S> {
    pub fn len(&self) -> usize {
        self.latents.rows
    }

    pub fn is_empty(&self) -> bool {
        self.latents.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.latents.cols
    }
}

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

/// Diagonal Gaussian over a sequence, `mu` and `log_sigma` both `[frames x d]`.
/// `sigma` is a standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<S> {
    pub mu: Tensor<S>,
    pub log_sigma: Tensor<S>,
}

impl<S: Scalar> GaussianParams<S> {
    /// Builds the parameters, clamping `log_sigma` to `[-7, 7]`.
    pub fn new(mu: Tensor<S>, log_sigma: Tensor<S>) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::Shape("mu and log_sigma differ in shape".into()));
        }
        let log_sigma = log_sigma.map(|v| v.max(S::c(LOG_SIGMA_MIN)).min(S::c(LOG_SIGMA_MAX)));
        Ok(GaussianParams { mu, log_sigma })
    }

    pub fn standard(frames: usize, dim: usize) -> Self {
        GaussianParams {
            mu: Tensor::zeros(frames, dim),
            log_sigma: Tensor::zeros(frames, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.rows
    }

    pub fn is_empty(&self) -> bool {
        self.mu.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.cols
    }

    pub fn row(&self, t: usize) -> (&[S], &[S]) {
        (self.mu.row(t), self.log_sigma.row(t))
    }
}
