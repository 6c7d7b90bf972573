//! Small differentiable layers built on [`Graph`].

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::params::{init_normal, init_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Affine map `x W + b` with `W: [in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Zero weights, constant bias.
    pub fn new_const<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::full(1, fan_out, S::c(bias)));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Single-layer LSTM, gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wx = store.add(format!("{name}.wx"), init_uniform(rng, input, 4 * hidden));
        let wh = store.add(format!("{name}.wh"), init_uniform(rng, hidden, 4 * hidden));
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.data[j] = S::one();
        }
        let b = store.add(format!("{name}.b"), bias);
        Lstm {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    pub fn zero_state<S: Scalar>(&self, g: &mut Graph<S>, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(batch, self.hidden));
        let c = g.constant(Tensor::zeros(batch, self.hidden));
        LstmState { h, c }
    }

    /// Input projection `x Wx + b` for a whole stacked sequence.
    pub fn project<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let wx = g.param(store, self.wx);
        let b = g.param(store, self.b);
        let p = g.matmul(x, wx);
        g.add(p, b)
    }

    /// Advance one step given the projected input for this step.
    pub fn step_projected<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        xp: Var,
        state: LstmState,
    ) -> LstmState {
        let wh = g.param(store, self.wh);
        let hh = g.matmul(state.h, wh);
        let gates = g.add(xp, hh);
        let hd = self.hidden;
        let i = g.slice_cols(gates, 0, hd);
        let f = g.slice_cols(gates, hd, hd);
        let c_in = g.slice_cols(gates, 2 * hd, hd);
        let o = g.slice_cols(gates, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_in = g.tanh(c_in);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, c_in);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }

    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        state: LstmState,
    ) -> LstmState {
        let xp = self.project(g, store, x);
        self.step_projected(g, store, xp, state)
    }

    /// Run over a time-major stacked sequence `[steps*batch x input]` from a
    /// zero state, returning hidden states `[steps*batch x hidden]`.
    pub fn run<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        xs: Var,
        batch: usize,
    ) -> Var {
        let steps = g.shape(xs).0 / batch;
        let xp = self.project(g, store, xs);
        let mut state = self.zero_state(g, batch);
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(xp, t * batch, batch);
            state = self.step_projected(g, store, xt, state);
            hs.push(state.h);
        }
        g.concat_rows(&hs)
    }
}

/// 2-D convolution layer over flattened `[c, h, w]` rows.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = geom.in_c * geom.k * geom.k;
        let w = store.add(
            format!("{name}.w"),
            init_normal(rng, geom.out_c, fan_in, (2.0 / fan_in as f64).sqrt()),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, geom.out_c));
        Conv2d { w, b, geom }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.geom)
    }
}

/// Row-wise `x / sqrt(|x|^2 + eps^2)`; finite for all-zero rows.
pub fn l2_normalize_rows<S: Scalar>(g: &mut Graph<S>, x: Var, eps: f64) -> Var {
    let sq = g.square(x);
    let n2 = g.row_sum(sq);
    let n2 = g.add_scalar(n2, S::c(eps * eps));
    let n = g.sqrt(n2);
    g.div(x, n)
}

/// Reflect an index into `[0, len)` (`-1 -> 1`, `len -> len - 2`), clamping
/// when the sequence is too short to reflect.
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n <= 1 {
        return 0;
    }
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j.clamp(0, n - 1) as usize
}

/// Row gather map shifting a time-major `[steps*batch x d]` sequence by
/// `offset` frames with reflect padding.
pub fn shift_index(steps: usize, batch: usize, offset: isize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(steps * batch);
    for t in 0..steps {
        let src = reflect_index(t as isize + offset, steps);
        for b in 0..batch {
            idx.push(src * batch + b);
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
        assert_eq!(reflect_index(-3, 2), 0);
    }

    #[test]
    fn lstm_step_matches_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, "l", 3, 4, &mut rng);
        let xs = init_normal::<f64>(&mut rng, 10, 3, 1.0);
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let run = lstm.run(&mut g, &store, x, 2);
        let mut state = lstm.zero_state(&mut g, 2);
        for t in 0..5 {
            let xt = g.slice_rows(x, 2 * t, 2);
            state = lstm.step(&mut g, &store, xt, state);
            let expect = g.value(run).slice_rows(2 * t, 2);
            let got = g.value(state.h);
            for (a, b) in expect.data.iter().zip(&got.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_zero_row_is_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(2, 3));
        let y = l2_normalize_rows(&mut g, x, 1e-8);
        assert!(g.value(y).all_finite());
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.wrt(x).unwrap().all_finite());
    }
}
