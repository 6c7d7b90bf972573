//! Autoregressive prior over motion latents with a flow on top, the KL
//! objective, and prior sampling.
//!
//! The base density lives on `z = f(m)`. Frame 0 is Gaussian with parameters
//! from the first style code of the layer; frame t > 0 comes from a recurrent
//! network fed the previous conditioning frame and the current audio feature.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::nn::Linear;
use crate::nn::Lstm;
use crate::params::ParamStore;
use crate::posterior::{posterior_log_prob, PosteriorOut};
use crate::prob::{clamp_log_sigma, gaussian_log_prob_rows, standard_normal};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the recurrent base sees from the previous frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorCondition {
    /// Flow outputs `z_{t-1}`.
    Base,
    /// Raw latents `m_{t-1}`.
    Motion,
}

impl PriorCondition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(PriorCondition::Base),
            "m" => Ok(PriorCondition::Motion),
            other => Err(Error::Config(format!("prior_condition must be z or m, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorDims {
    pub style_dim: usize,
    pub audio_dim: usize,
    pub audio_proj: usize,
    pub hidden: usize,
    pub motion_dim: usize,
    pub condition: PriorCondition,
}

#[derive(Clone, Debug)]
pub struct Prior {
    pub dims: PriorDims,
    pub init: Linear,
    pub audio_proj: Linear,
    pub lstm: Lstm,
    pub head: Linear,
}

impl Prior {
    /// Both output heads start at zero, so the untrained base is N(0, I).
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dims: PriorDims, rng: &mut impl Rng) -> Self {
        let dm = dims.motion_dim;
        let init = Linear::new_const(store, &format!("{name}.init"), dims.style_dim, 2 * dm, 0.0);
        let audio_proj = Linear::new(store, &format!("{name}.audio"), dims.audio_dim, dims.audio_proj, rng);
        let lstm = Lstm::new(store, &format!("{name}.lstm"), dm + dims.audio_proj, dims.hidden, rng);
        let head = Linear::new_const(store, &format!("{name}.head"), dims.hidden, 2 * dm, 0.0);
        Prior {
            dims,
            init,
            audio_proj,
            lstm,
            head,
        }
    }

    fn split<S: Scalar>(&self, g: &mut Graph<S>, out: Var) -> (Var, Var) {
        let dm = self.dims.motion_dim;
        let mu = g.slice_cols(out, 0, dm);
        let ls = g.slice_cols(out, dm, dm);
        (mu, clamp_log_sigma(g, ls))
    }

    /// Base Gaussian parameters for every frame given the conditioning
    /// sequence `[T*B x d_m]`, audio `[T*B x d_a]` and first codes `w0: [B x D]`.
    pub fn base_params<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        cond: Var,
        a: Var,
        w0: Var,
        batch: usize,
    ) -> (Var, Var) {
        let frames = g.shape(cond).0 / batch;
        let o0 = self.init.forward(g, store, w0);
        let (mu0, ls0) = self.split(g, o0);
        if frames <= 1 {
            return (mu0, ls0);
        }
        let zero = g.constant(Tensor::zeros(batch, self.dims.motion_dim));
        let head = g.slice_rows(cond, 0, (frames - 1) * batch);
        let prev = g.concat_rows(&[zero, head]);
        let ap = self.audio_proj.forward(g, store, a);
        let inp = g.concat_cols(&[prev, ap]);
        let hs = self.lstm.run(g, store, inp, batch);
        let hs = g.slice_rows(hs, batch, (frames - 1) * batch);
        let out = self.head.forward(g, store, hs);
        let (mu, ls) = self.split(g, out);
        (g.concat_rows(&[mu0, mu]), g.concat_rows(&[ls0, ls]))
    }

    /// `log p'(m)` per sequence, averaged over the batch.
    pub fn log_prob<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        flow: &Flow,
        m: Var,
        a: Var,
        w0: Var,
        batch: usize,
    ) -> Var {
        let (z, log_det) = flow.forward(g, store, m, a, batch);
        let cond = match self.dims.condition {
            PriorCondition::Base => z,
            PriorCondition::Motion => m,
        };
        let (mu, ls) = self.base_params(g, store, cond, a, w0, batch);
        let rows = gaussian_log_prob_rows(g, z, mu, ls);
        let s = g.sum(rows);
        let lp = g.scale(s, S::c(1.0 / batch as f64));
        g.add(lp, log_det)
    }

    /// Draw `m` frame by frame: sample the base frame, invert the flow for
    /// that frame, then feed the chosen conditioning into the next step.
    pub fn sample<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        flow: &Flow,
        a: &Tensor<S>,
        w0: &Tensor<S>,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Tensor<S> {
        let dm = self.dims.motion_dim;
        let frames = a.rows / batch;
        if frames == 0 {
            return Tensor::zeros(0, dm);
        }
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let wv = g.constant(w0.clone());
        let ap = self.audio_proj.forward(&mut g, store, av);
        let mut inv = flow.inverter(&mut g, batch);
        let mut state = self.lstm.zero_state(&mut g, batch);
        let mut prev = g.constant(Tensor::zeros(batch, dm));
        let mut out = Tensor::zeros(frames * batch, dm);
        for t in 0..frames {
            let apt = g.slice_rows(ap, t * batch, batch);
            let inp = g.concat_cols(&[prev, apt]);
            state = self.lstm.step(&mut g, store, inp, state);
            let o = if t == 0 {
                self.init.forward(&mut g, store, wv)
            } else {
                self.head.forward(&mut g, store, state.h)
            };
            let (mu, ls) = self.split(&mut g, o);
            let eps = g.constant(standard_normal(rng, batch, dm));
            let sd = g.exp(ls);
            let noise = g.mul(sd, eps);
            let zt = g.add(mu, noise);
            let at = g.slice_rows(av, t * batch, batch);
            let mt = inv.invert_frame(&mut g, store, flow, zt, at);
            out.data[t * batch * dm..(t + 1) * batch * dm].copy_from_slice(&g.value(mt).data);
            prev = match self.dims.condition {
                PriorCondition::Base => zt,
                PriorCondition::Motion => mt,
            };
        }
        out
    }
}

/// Single-sample estimate `log q(m) - log p'(m)` per sequence, averaged over
/// the batch; `m` should be a reparameterized draw from `post`.
#[allow(clippy::too_many_arguments)]
pub fn kl_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    post: PosteriorOut,
    m: Var,
    prior: &Prior,
    flow: &Flow,
    a: Var,
    w0: Var,
    batch: usize,
) -> Var {
    let lq = posterior_log_prob(g, post, m, batch);
    let lp = prior.log_prob(g, store, flow, m, a, w0, batch);
    g.sub(lq, lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::tests::dims as flow_dims;
    use crate::oracles::{randomize_flow, randomize_prior};
    use crate::flow::FlowDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pdims(dm: usize, condition: PriorCondition) -> PriorDims {
        PriorDims {
            style_dim: 5,
            audio_dim: 3,
            audio_proj: 4,
            hidden: 6,
            motion_dim: dm,
            condition,
        }
    }

    fn build(dm: usize, steps: usize, condition: PriorCondition, seed: u64) -> (ParamStore<f64>, Prior, Flow) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let prior = Prior::new(&mut store, "p", pdims(dm, condition), &mut rng);
        let fd = FlowDims {
            motion_dim: dm,
            ..flow_dims(dm)
        };
        let flow = Flow::new(&mut store, "f", fd, steps, &mut rng).unwrap();
        (store, prior, flow)
    }

    fn log_prob(store: &ParamStore<f64>, prior: &Prior, flow: &Flow, m: &Tensor<f64>, a: &Tensor<f64>, w0: &Tensor<f64>, b: usize) -> f64 {
        let mut g = Graph::new();
        let (mv, av, wv) = (g.constant(m.clone()), g.constant(a.clone()), g.constant(w0.clone()));
        let lp = prior.log_prob(&mut g, store, flow, mv, av, wv, b);
        g.item(lp)
    }

    #[test]
    fn zero_nets_closed_form() {
        let (store, prior, flow) = build(16, 4, PriorCondition::Base, 1);
        let m = Tensor::zeros(2, 16);
        let a = Tensor::full(2, 3, 0.3);
        let w0 = Tensor::full(1, 5, -0.2);
        let lp = log_prob(&store, &prior, &flow, &m, &a, &w0, 1);
        let expect = 2.0 * (-8.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((lp - expect).abs() < 1e-9);
        assert!((lp + 29.41).abs() < 0.01);
    }

    #[test]
    fn sampling_determinism_and_standard_normal() {
        let (store, prior, flow) = build(2, 3, PriorCondition::Base, 3);
        let b = 10_000;
        let a = standard_normal::<f64>(&mut ChaCha8Rng::seed_from_u64(9), 3 * b, 3);
        let w0 = Tensor::zeros(b, 5);
        let s1 = prior.sample(&store, &flow, &a, &w0, b, &mut ChaCha8Rng::seed_from_u64(5));
        let s2 = prior.sample(&store, &flow, &a, &w0, b, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(s1, s2);
        for c in 0..6 {
            let (t, d) = (c / 2, c % 2);
            let vals: Vec<f64> = (0..b).map(|i| s1.get(t * b + i, d)).collect();
            let mean = vals.iter().sum::<f64>() / b as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
        let empty = prior.sample(&store, &flow, &Tensor::zeros(0, 3), &w0, b, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(empty.rows, 0);
    }

    #[test]
    fn samples_have_finite_density_under_both_conditionings() {
        for cond in [PriorCondition::Base, PriorCondition::Motion] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (mut store, prior, flow) = build(4, 2, cond, 4);
            randomize_flow(&mut store, &flow, &mut rng, 0.5);
            randomize_prior(&mut store, &prior, &mut rng, 0.3);
            let b = 3;
            let a = standard_normal::<f64>(&mut rng, 7 * b, 3);
            let w0 = standard_normal::<f64>(&mut rng, b, 5);
            let m = prior.sample(&store, &flow, &a, &w0, b, &mut rng);
            let lp = log_prob(&store, &prior, &flow, &m, &a, &w0, b);
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn sampling_matches_density_factorization() {
        // Sampling with fixed noise then scoring must recover the same base
        // noise: z from the forward flow standardized by the base params.
        for cond in [PriorCondition::Base, PriorCondition::Motion] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let (mut store, prior, flow) = build(4, 3, cond, 6);
            randomize_flow(&mut store, &flow, &mut rng, 0.5);
            randomize_prior(&mut store, &prior, &mut rng, 0.3);
            let b = 2;
            let a = standard_normal::<f64>(&mut rng, 5 * b, 3);
            let w0 = standard_normal::<f64>(&mut rng, b, 5);
            let m = prior.sample(&store, &flow, &a, &w0, b, &mut ChaCha8Rng::seed_from_u64(11));
            let mut noise_rng = ChaCha8Rng::seed_from_u64(11);
            let eps: Vec<Tensor<f64>> = (0..5).map(|_| standard_normal(&mut noise_rng, b, 4)).collect();
            let mut g = Graph::new();
            let (mv, av, wv) = (g.constant(m), g.constant(a), g.constant(w0));
            let (z, _) = flow.forward(&mut g, &store, mv, av, b);
            let c = if cond == PriorCondition::Base { z } else { mv };
            let (mu, ls) = prior.base_params(&mut g, &store, c, av, wv, b);
            let (z, mu, ls) = (g.value(z), g.value(mu), g.value(ls));
            for t in 0..5 {
                for i in 0..b * 4 {
                    let k = t * b * 4 + i;
                    let e = (z.data[k] - mu.data[k]) / ls.data[k].exp();
                    assert!((e - eps[t].data[i]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn parse_condition() {
        assert_eq!(PriorCondition::parse("z").unwrap(), PriorCondition::Base);
        assert_eq!(PriorCondition::parse("m").unwrap(), PriorCondition::Motion);
        assert!(PriorCondition::parse("x").is_err());
    }
}
