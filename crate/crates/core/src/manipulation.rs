//! Temporal smoothing of audio and motion features into control vectors, and
//! the two-way gated edit of a reference style code.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{shift_index, Linear, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Normalized Gaussian taps for offsets `-(k/2)..=k/2`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let w: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Fixed Gaussian blur along time, then a centered temporal convolution
/// (reflect padding) and LeakyReLU.
#[derive(Clone, Debug)]
pub struct Smoother {
    pub kernel: Vec<f64>,
    pub conv_size: usize,
    pub conv: Linear,
}

impl Smoother {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        channels: usize,
        kernel: Vec<f64>,
        conv_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Linear::new(store, &format!("{name}.conv"), in_dim * conv_size, channels, rng);
        Smoother {
            kernel,
            conv_size,
            conv,
        }
    }

    /// Gaussian blur of a time-major `[T*B x d]` sequence.
    pub fn blur<S: Scalar>(&self, g: &mut Graph<S>, x: Var, batch: usize) -> Var {
        let steps = g.shape(x).0 / batch;
        let half = (self.kernel.len() / 2) as isize;
        let mut acc = None;
        for (j, &k) in self.kernel.iter().enumerate() {
            let shifted = g.gather_rows(x, shift_index(steps, batch, j as isize - half));
            let term = g.scale(shifted, S::c(k));
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        acc.expect("kernel has at least one tap")
    }

    /// Temporal convolution and activation, skipping the blur.
    pub fn conv_only<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, batch: usize) -> Var {
        let steps = g.shape(x).0 / batch;
        let half = (self.conv_size / 2) as isize;
        let taps: Vec<Var> = (0..self.conv_size)
            .map(|j| g.gather_rows(x, shift_index(steps, batch, j as isize - half)))
            .collect();
        let stacked = g.concat_cols(&taps);
        let y = self.conv.forward(g, store, stacked);
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Control vectors `[T*B x channels]` from `[a; m]` features.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, batch: usize) -> Var {
        let b = self.blur(g, x, batch);
        self.conv_only(g, store, b, batch)
    }
}

/// `c' = sig(K1 w) * c + K2 w`, `w_hat = sig(K3 c') * w + K4 c'`.
#[derive(Clone, Debug)]
pub struct Manipulator {
    pub k1: Linear,
    pub k2: Linear,
    pub k3: Linear,
    pub k4: Linear,
}

impl Manipulator {
    /// K3 starts with bias `gate_bias` and K4 at zero so the edit begins
    /// close to the identity.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        style_dim: usize,
        channels: usize,
        gate_bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k1 = Linear::new(store, &format!("{name}.k1"), style_dim, channels, rng);
        let k2 = Linear::new(store, &format!("{name}.k2"), style_dim, channels, rng);
        let k3 = Linear::new(store, &format!("{name}.k3"), channels, style_dim, rng);
        store
            .value_mut(k3.b)
            .data
            .iter_mut()
            .for_each(|v| *v = S::c(gate_bias));
        let k4 = Linear::new_const(store, &format!("{name}.k4"), channels, style_dim, 0.0);
        Manipulator { k1, k2, k3, k4 }
    }

    /// `w_ref: [n x D]` (or `[1 x D]`, broadcast), `c: [n x C]` -> `[n x D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, w_ref: Var, c: Var) -> Var {
        let g1 = self.k1.forward(g, store, w_ref);
        let g1 = g.sigmoid(g1);
        let sh = self.k2.forward(g, store, w_ref);
        let cg = g.mul(g1, c);
        let cp = g.add(cg, sh);
        let g3 = self.k3.forward(g, store, cp);
        let g3 = g.sigmoid(g3);
        let add = self.k4.forward(g, store, cp);
        let wg = g.mul(g3, w_ref);
        g.add(wg, add)
    }
}
