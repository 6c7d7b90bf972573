//! Causal audio feature encoder: a small MLP over the current and previous
//! raw audio frames.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub context: usize,
    pub raw_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl AudioEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        context: usize,
        raw_dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AudioEncoder {
            context,
            raw_dim,
            fc1: Linear::new(store, "audio_enc.fc1", context * raw_dim, hidden, rng),
            fc2: Linear::new(store, "audio_enc.fc2", hidden, out, rng),
        }
    }

    /// `[T*B x raw_dim]` time-major raw audio to `[T*B x d_a]` features;
    /// frame t sees raw frames `t-context+1..=t` (zeros before the start).
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, audio: Var, batch: usize) -> Var {
        let rows = g.shape(audio).0;
        let mut lags = Vec::with_capacity(self.context);
        for j in 0..self.context {
            let pad = (j * batch).min(rows);
            if pad == 0 {
                lags.push(audio);
                continue;
            }
            let zeros = g.constant(Tensor::zeros(pad, self.raw_dim));
            if pad == rows {
                lags.push(zeros);
                continue;
            }
            let head = g.slice_rows(audio, 0, rows - pad);
            lags.push(g.concat_rows(&[zeros, head]));
        }
        let x = g.concat_cols(&lags);
        let h = self.fc1.forward(g, store, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.fc2.forward(g, store, h)
    }
}
