//! Volume-preserving normalizing flow over motion-latent sequences.
//!
//! Each step is an actnorm followed by an affine coupling whose scale and
//! shift come from a recurrent network over time. The network at frame t sees
//! the conditioning half at t, the transformed half's *input* at t-1, and the
//! audio feature at t, so the forward direction runs over all frames at once
//! while the inverse runs frame by frame. All log-scales are mean-centered per
//! frame, which makes the log-determinant identically zero.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Lstm, LstmState};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowDims {
    pub motion_dim: usize,
    pub audio_dim: usize,
    pub hidden: usize,
    pub scale_bound: f64,
}

#[derive(Clone, Debug)]
pub struct FlowStep {
    pub log_scale: ParamId,
    pub bias: ParamId,
    pub lstm: Lstm,
    pub head: Linear,
    /// Conditioning half is the leading block of columns.
    cond_first: bool,
}

#[derive(Clone, Debug)]
pub struct Flow {
    pub dims: FlowDims,
    pub steps: Vec<FlowStep>,
}

/// Column split of one coupling: `(cond_start, cond_len, trans_start, trans_len)`.
fn split(d: usize, cond_first: bool) -> (usize, usize, usize, usize) {
    let h = d / 2;
    if cond_first {
        (0, h, h, d - h)
    } else {
        (h, d - h, 0, h)
    }
}

fn assemble<S: Scalar>(g: &mut Graph<S>, cond: Var, trans: Var, cond_first: bool) -> Var {
    if cond_first {
        g.concat_cols(&[cond, trans])
    } else {
        g.concat_cols(&[trans, cond])
    }
}

/// `v - mean(v)` along each row.
fn center_rows<S: Scalar>(g: &mut Graph<S>, v: Var) -> Var {
    let cols = g.shape(v).1;
    let s = g.row_sum(v);
    let m = g.scale(s, S::c(1.0 / cols as f64));
    g.sub(v, m)
}

impl Flow {
    /// Identity at initialization: actnorm at zero, coupling heads zero.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: FlowDims,
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_steps > 0 && dims.motion_dim < 2 {
            return Err(Error::Config("a coupling flow needs motion_dim >= 2".into()));
        }
        let d = dims.motion_dim;
        let steps = (0..n_steps)
            .map(|k| {
                let cond_first = k % 2 == 0;
                let (_, cl, _, tl) = split(d, cond_first);
                let p = format!("{name}.step{k}");
                let log_scale = store.add(format!("{p}.an_log_scale"), Tensor::zeros(1, d));
                let bias = store.add(format!("{p}.an_bias"), Tensor::zeros(1, d));
                let lstm = Lstm::new(store, &format!("{p}.lstm"), cl + tl + dims.audio_dim, dims.hidden, rng);
                let head = Linear::new_const(store, &format!("{p}.head"), dims.hidden, 2 * tl, 0.0);
                FlowStep {
                    log_scale,
                    bias,
                    lstm,
                    head,
                    cond_first,
                }
            })
            .collect();
        Ok(Flow { dims, steps })
    }

    fn actnorm_scale<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, step: &FlowStep) -> (Var, Var) {
        let s = g.param(store, step.log_scale);
        let m = g.mean(s);
        let sc = g.sub(s, m);
        let b = g.param(store, step.bias);
        (sc, b)
    }

    /// Centered log-scale and shift of the transformed half.
    fn coupling_out<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, step: &FlowStep, hs: Var) -> (Var, Var) {
        let tl = step.head.fan_out / 2;
        let out = step.head.forward(g, store, hs);
        let raw = g.slice_cols(out, 0, tl);
        let shift = g.slice_cols(out, tl, tl);
        let t = g.tanh(raw);
        let ls = g.scale(t, S::c(self.dims.scale_bound));
        (center_rows(g, ls), shift)
    }

    fn step_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        k: usize,
        x: Var,
        a: Var,
        batch: usize,
    ) -> (Var, Var) {
        let step = &self.steps[k];
        let (rows, d) = g.shape(x);
        let frames = rows / batch;
        let (sc, b) = Self::actnorm_scale(g, store, step);
        let xs = g.add(x, b);
        let e = g.exp(sc);
        let x = g.mul(xs, e);
        let sc_sum = g.sum(sc);
        let ld_an = g.scale(sc_sum, S::c(frames as f64));

        let (cs, cl, ts, tl) = split(d, step.cond_first);
        let xa = g.slice_cols(x, cs, cl);
        let xb = g.slice_cols(x, ts, tl);
        let zero = g.constant(Tensor::zeros(batch, tl));
        let xb_prev = if frames > 1 {
            let head = g.slice_rows(xb, 0, (frames - 1) * batch);
            g.concat_rows(&[zero, head])
        } else {
            zero
        };
        let inp = g.concat_cols(&[xa, xb_prev, a]);
        let hs = step.lstm.run(g, store, inp, batch);
        let (ls, shift) = self.coupling_out(g, store, step, hs);
        let el = g.exp(ls);
        let yb = g.mul(xb, el);
        let yb = g.add(yb, shift);
        let ls_sum = g.sum(ls);
        let ld_c = g.scale(ls_sum, S::c(1.0 / batch as f64));
        let y = assemble(g, xa, yb, step.cond_first);
        let ld = g.add(ld_an, ld_c);
        (y, ld)
    }

    /// `z = f(m)` over a time-major batch `[T*B x d_m]` with audio features
    /// `[T*B x d_a]`; the log-determinant is per sequence, averaged over the
    /// batch.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, m: Var, a: Var, batch: usize) -> (Var, Var) {
        let mut x = m;
        let mut ld = g.constant(Tensor::scalar(S::zero()));
        for k in 0..self.steps.len() {
            let (y, l) = self.step_forward(g, store, k, x, a, batch);
            x = y;
            ld = g.add(ld, l);
        }
        (x, ld)
    }

    /// `m = f^{-1}(z)`, frame by frame.
    pub fn inverse<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, z: Var, a: Var, batch: usize) -> Var {
        let frames = g.shape(z).0 / batch;
        let mut inv = self.inverter(g, batch);
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let zt = g.slice_rows(z, t * batch, batch);
            let at = g.slice_rows(a, t * batch, batch);
            out.push(inv.invert_frame(g, store, self, zt, at));
        }
        if out.is_empty() {
            return g.constant(Tensor::zeros(0, self.dims.motion_dim));
        }
        g.concat_rows(&out)
    }

    pub fn inverter<S: Scalar>(&self, g: &mut Graph<S>, batch: usize) -> FlowInverter {
        let states = self.steps.iter().map(|s| s.lstm.zero_state(g, batch)).collect();
        let prev = self
            .steps
            .iter()
            .map(|s| g.constant(Tensor::zeros(batch, s.head.fan_out / 2)))
            .collect();
        FlowInverter { states, prev }
    }

    /// Data-dependent actnorm initialization: each step's input is shifted to
    /// zero mean and scaled by its inverse standard deviation (before the
    /// log-scales are centered).
    pub fn init_actnorm<S: Scalar>(&self, store: &mut ParamStore<S>, m: &Tensor<S>, a: &Tensor<S>, batch: usize) {
        let mut x = m.clone();
        for k in 0..self.steps.len() {
            let n = x.rows.max(1) as f64;
            let d = x.cols;
            let mut bias = Tensor::zeros(1, d);
            let mut ls = Tensor::zeros(1, d);
            for c in 0..d {
                let mean = (0..x.rows).map(|r| x.get(r, c).f64()).sum::<f64>() / n;
                let var = (0..x.rows).map(|r| (x.get(r, c).f64() - mean).powi(2)).sum::<f64>() / n;
                bias.data[c] = S::c(-mean);
                ls.data[c] = S::c(-0.5 * (var + 1e-6).ln());
            }
            *store.value_mut(self.steps[k].bias) = bias;
            *store.value_mut(self.steps[k].log_scale) = ls;
            let mut g = Graph::new();
            let (xv, av) = (g.constant(x.clone()), g.constant(a.clone()));
            let (y, _) = self.step_forward(&mut g, store, k, xv, av, batch);
            x = g.value(y).clone();
        }
    }
}

/// Recurrent state for inverting a flow one frame at a time.
#[derive(Clone, Debug)]
pub struct FlowInverter {
    states: Vec<LstmState>,
    prev: Vec<Var>,
}

impl FlowInverter {
    /// Invert frame t given `z_t: [B x d_m]` and `a_t: [B x d_a]`. Frames
    /// must be fed in order.
    pub fn invert_frame<S: Scalar>(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, flow: &Flow, zt: Var, at: Var) -> Var {
        let d = flow.dims.motion_dim;
        let mut y = zt;
        for k in (0..flow.steps.len()).rev() {
            let step = &flow.steps[k];
            let (cs, cl, ts, tl) = split(d, step.cond_first);
            let xa = g.slice_cols(y, cs, cl);
            let yb = g.slice_cols(y, ts, tl);
            let inp = g.concat_cols(&[xa, self.prev[k], at]);
            self.states[k] = step.lstm.step(g, store, inp, self.states[k]);
            let (ls, shift) = flow.coupling_out(g, store, step, self.states[k].h);
            let diff = g.sub(yb, shift);
            let nls = g.neg(ls);
            let e = g.exp(nls);
            let xb = g.mul(diff, e);
            self.prev[k] = xb;
            let x = assemble(g, xa, xb, step.cond_first);
            let (sc, b) = Flow::actnorm_scale(g, store, step);
            let nsc = g.neg(sc);
            let e = g.exp(nsc);
            let x = g.mul(x, e);
            y = g.sub(x, b);
        }
        y
    }
}
