//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are constants,
//! differentiable inputs, or parameters borrowed (by copy) from a
//! [`ParamStore`]; every op records its parents so [`Graph::backward`] can
//! walk the tape in reverse.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnKind {
    Neg,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Ln,
    Square,
    Sqrt,
}

/// Geometry of a 2-D convolution over images flattened as `[c, h, w]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { a: Var, b: Var, kind: BinKind },
    Unary { a: Var, kind: UnKind },
    Scale { a: Var, s: S },
    AddScalar { a: Var },
    Clamp { a: Var, lo: S, hi: S },
    SumAll { a: Var },
    RowSum { a: Var },
    ColSum { a: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape { a: Var },
    Transpose { a: Var },
    LogSoftmaxRows { a: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    AvgPool2 { a: Var, c: usize, h: usize, w: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to `v`, zeros if `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_dim(a: usize, b: usize) -> usize {
    if a == b {
        a
    } else if a == 1 {
        b
    } else if b == 1 {
        a
    } else {
        panic!("cannot broadcast {a} against {b}")
    }
}

/// Sum `g` (shaped like the broadcast output) down to `rows x cols`.
fn reduce_to<S: Scalar>(g: &Tensor<S>, rows: usize, cols: usize) -> Tensor<S> {
    if g.rows == rows && g.cols == cols {
        return g.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..g.rows {
        let rr = if rows == 1 { 0 } else { r };
        for c in 0..g.cols {
            let cc = if cols == 1 { 0 } else { c };
            out.data[rr * cols + cc] += g.data[r * g.cols + c];
        }
    }
    out
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let prow = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[prow * npix..(prow + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let prow = (c * g.k + ky) * g.k + kx;
                let src = &cols[prow * npix..(prow + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        dx[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated requests for the
    /// same parameter return the same node. Parameters of frozen stores are
    /// constants.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Leaf,
            !store.is_frozen(),
        );
        self.params.insert(key, v);
        v
    }

    /// Graph nodes created for parameters of `store`.
    pub fn param_nodes(&self, store_uid: u64) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params
            .iter()
            .filter(move |((uid, _), _)| *uid == store_uid)
            .map(|((_, id), v)| (*id, *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            ng,
        )
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_t inner dimension");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        S::gemm(
            ta.rows,
            ta.cols,
            tb.rows,
            S::one(),
            &ta.data,
            ta.cols as isize,
            1,
            &tb.data,
            1,
            tb.cols as isize,
            S::zero(),
            &mut out.data,
            tb.rows as isize,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, trans_b: true }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let rows = bcast_dim(ta.rows, tb.rows);
        let cols = bcast_dim(ta.cols, tb.cols);
        let mut out = Tensor::zeros(rows, cols);
        let f = |x: S, y: S| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.data.iter_mut().zip(&ta.data).zip(&tb.data) {
                *o = f(x, y);
            }
        } else {
            for r in 0..rows {
                let ra = if ta.rows == 1 { 0 } else { r };
                let rb = if tb.rows == 1 { 0 } else { r };
                for c in 0..cols {
                    let ca = if ta.cols == 1 { 0 } else { c };
                    let cb = if tb.cols == 1 { 0 } else { c };
                    out.data[r * cols + c] =
                        f(ta.data[ra * ta.cols + ca], tb.data[rb * tb.cols + cb]);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Binary { a, b, kind }, ng)
    }

    /// Elementwise ops broadcast operands of extent 1 along either axis.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Div)
    }

    fn unary(&mut self, a: Var, kind: UnKind) -> Var {
        let f: Box<dyn Fn(S) -> S> = match kind {
            UnKind::Neg => Box::new(|x: S| -x),
            UnKind::Sigmoid => Box::new(|x: S| S::one() / (S::one() + (-x).exp())),
            UnKind::Tanh => Box::new(|x: S| x.tanh()),
            UnKind::LeakyRelu(alpha) => {
                let alpha = S::c(alpha);
                Box::new(move |x: S| if x > S::zero() { x } else { alpha * x })
            }
            UnKind::Exp => Box::new(|x: S| x.exp()),
            UnKind::Ln => Box::new(|x: S| x.ln()),
            UnKind::Square => Box::new(|x: S| x * x),
            UnKind::Sqrt => Box::new(|x: S| x.sqrt()),
        };
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, Op::Unary { a, kind }, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Neg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, UnKind::LeakyRelu(alpha))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Sqrt)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, s }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar { a }, ng)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp { a, lo, hi }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, S::one() / S::c(n as f64))
    }

    /// `[r x c] -> [r x 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, 1);
        for r in 0..t.rows {
            out.data[r] = t.row(r).iter().copied().sum();
        }
        let ng = self.ng(a);
        self.push(out, Op::RowSum { a }, ng)
    }

    /// `[r x c] -> [1 x c]`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, &v) in out.data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ColSum { a }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(j));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows { a, idx }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape { a }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose { a }, ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row(r);
            let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows { a }, ng)
    }

    /// 2-D convolution. `x: [n x in_len]`, `w: [out_c x in_c*k*k]`, `b: [1 x out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.cols, geom.in_len(), "conv2d input size");
        assert_eq!(tw.shape(), (geom.out_c, geom.patch()), "conv2d weight shape");
        assert_eq!(tb.shape(), (1, geom.out_c), "conv2d bias shape");
        let npix = geom.out_h() * geom.out_w();
        let mut out = Tensor::zeros(tx.rows, geom.out_len());
        let mut cols = vec![S::zero(); geom.patch() * npix];
        for n in 0..tx.rows {
            im2col(tx.row(n), &geom, &mut cols);
            let o = out.row_mut(n);
            for (oc, chunk) in o.chunks_mut(npix).enumerate() {
                chunk.fill(tb.data[oc]);
            }
            S::gemm(
                geom.out_c,
                geom.patch(),
                npix,
                S::one(),
                &tw.data,
                geom.patch() as isize,
                1,
                &cols,
                npix as isize,
                1,
                S::one(),
                o,
                npix as isize,
                1,
            );
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// 2x2 average pooling of `[c, h, w]` images (h, w even).
    pub fn avg_pool2(&mut self, a: Var, c: usize, h: usize, w: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols, c * h * w, "avg_pool2 input size");
        let (oh, ow) = (h / 2, w / 2);
        let q = S::c(0.25);
        let mut out = Tensor::zeros(t.rows, c * oh * ow);
        for n in 0..t.rows {
            let x = t.row(n);
            let o = &mut out.data[n * c * oh * ow..(n + 1) * c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = (ch * h + 2 * y) * w + 2 * xx;
                        o[(ch * oh + y) * ow + xx] =
                            q * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::AvgPool2 { a, c, h, w }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        // dA = dC * B^T  (or dC * B when C = A B^T)
                        let mut da = Tensor::zeros(ta.rows, ta.cols);
                        if *trans_b {
                            S::gemm(ta.rows, tb.rows, ta.cols, S::one(), &gout.data,
                                gout.cols as isize, 1, &tb.data, tb.cols as isize, 1,
                                S::zero(), &mut da.data, ta.cols as isize, 1);
                        } else {
                            S::gemm(ta.rows, tb.cols, ta.cols, S::one(), &gout.data,
                                gout.cols as isize, 1, &tb.data, 1, tb.cols as isize,
                                S::zero(), &mut da.data, ta.cols as isize, 1);
                        }
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(tb.rows, tb.cols);
                        if *trans_b {
                            // dB = dC^T * A
                            S::gemm(tb.rows, ta.rows, tb.cols, S::one(), &gout.data,
                                1, gout.cols as isize, &ta.data, ta.cols as isize, 1,
                                S::zero(), &mut db.data, tb.cols as isize, 1);
                        } else {
                            // dB = A^T * dC
                            S::gemm(tb.rows, ta.rows, tb.cols, S::one(), &ta.data,
                                1, ta.cols as isize, &gout.data, gout.cols as isize, 1,
                                S::zero(), &mut db.data, tb.cols as isize, 1);
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Binary { a, b, kind } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (rows, cols) = out.shape();
                    let at = |t: &Tensor<S>, r: usize, c: usize| {
                        t.data[(if t.rows == 1 { 0 } else { r }) * t.cols
                            + if t.cols == 1 { 0 } else { c }]
                    };
                    if self.ng(*a) {
                        let ga = match kind {
                            BinKind::Add | BinKind::Sub => gout.clone(),
                            BinKind::Mul | BinKind::Div => {
                                let mut g = gout.clone();
                                for r in 0..rows {
                                    for c in 0..cols {
                                        let y = at(tb, r, c);
                                        let v = &mut g.data[r * cols + c];
                                        *v = if *kind == BinKind::Mul { *v * y } else { *v / y };
                                    }
                                }
                                g
                            }
                        };
                        acc(&mut grads, *a, reduce_to(&ga, ta.rows, ta.cols));
                    }
                    if self.ng(*b) {
                        let gb = match kind {
                            BinKind::Add => gout.clone(),
                            BinKind::Sub => gout.map(|v| -v),
                            BinKind::Mul | BinKind::Div => {
                                let mut g = gout.clone();
                                for r in 0..rows {
                                    for c in 0..cols {
                                        let x = at(ta, r, c);
                                        let y = at(tb, r, c);
                                        let v = &mut g.data[r * cols + c];
                                        *v = if *kind == BinKind::Mul {
                                            *v * x
                                        } else {
                                            -*v * x / (y * y)
                                        };
                                    }
                                }
                                g
                            }
                        };
                        acc(&mut grads, *b, reduce_to(&gb, tb.rows, tb.cols));
                    }
                }
                Op::Unary { a, kind } => {
                    let x = self.value(*a);
                    let mut g = gout;
                    for ((gv, &xv), &yv) in g.data.iter_mut().zip(&x.data).zip(&out.data) {
                        let d = match kind {
                            UnKind::Neg => -S::one(),
                            UnKind::Sigmoid => yv * (S::one() - yv),
                            UnKind::Tanh => S::one() - yv * yv,
                            UnKind::LeakyRelu(alpha) => {
                                if xv > S::zero() {
                                    S::one()
                                } else {
                                    S::c(*alpha)
                                }
                            }
                            UnKind::Exp => yv,
                            UnKind::Ln => S::one() / xv,
                            UnKind::Square => S::c(2.0) * xv,
                            UnKind::Sqrt => S::c(0.5) / yv,
                        };
                        *gv *= d;
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Scale { a, s } => {
                    let s = *s;
                    acc(&mut grads, *a, gout.map(|v| v * s));
                }
                Op::AddScalar { a } => acc(&mut grads, *a, gout),
                Op::Clamp { a, lo, hi } => {
                    let x = self.value(*a);
                    let mut g = gout;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        if xv < *lo || xv > *hi {
                            *gv = S::zero();
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SumAll { a } => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::full(r, c, gout.item()));
                }
                Op::RowSum { a } => {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    for i in 0..r {
                        g.row_mut(i).fill(gout.data[i]);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ColSum { a } => {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    for i in 0..r {
                        g.row_mut(i).copy_from_slice(&gout.data);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        if self.ng(p) {
                            acc(&mut grads, p, gout.slice_cols(off, w));
                        }
                        off += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    for i in 0..r {
                        g.row_mut(i)[*start..*start + gout.cols].copy_from_slice(gout.row(i));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows;
                        if self.ng(p) {
                            acc(&mut grads, p, gout.slice_rows(off, h));
                        }
                        off += h;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    g.data[start * c..(start + gout.rows) * c].copy_from_slice(&gout.data);
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows { a, idx } => {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        for (d, &s) in g.row_mut(j).iter_mut().zip(gout.row(i)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Reshape { a } => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::from_vec(r, c, gout.data));
                }
                Op::Transpose { a } => acc(&mut grads, *a, gout.transpose()),
                Op::LogSoftmaxRows { a } => {
                    let mut g = gout.clone();
                    for r in 0..out.rows {
                        let gs: S = gout.row(r).iter().copied().sum();
                        for (gv, &y) in g.row_mut(r).iter_mut().zip(out.row(r)) {
                            *gv -= y.exp() * gs;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let npix = geom.out_h() * geom.out_w();
                    let patch = geom.patch();
                    let mut cols = vec![S::zero(); patch * npix];
                    let mut dcols = vec![S::zero(); patch * npix];
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    let mut dw = Tensor::zeros(tw.rows, tw.cols);
                    let mut db = Tensor::zeros(1, geom.out_c);
                    for n in 0..tx.rows {
                        let go = gout.row(n);
                        if self.ng(*b) {
                            for (oc, chunk) in go.chunks(npix).enumerate() {
                                db.data[oc] += chunk.iter().copied().sum();
                            }
                        }
                        if self.ng(*w) {
                            im2col(tx.row(n), geom, &mut cols);
                            // dW += dO * cols^T
                            S::gemm(geom.out_c, npix, patch, S::one(), go, npix as isize, 1,
                                &cols, 1, npix as isize, S::one(), &mut dw.data,
                                patch as isize, 1);
                        }
                        if self.ng(*x) {
                            // dcols = W^T * dO
                            S::gemm(patch, geom.out_c, npix, S::one(), &tw.data, 1,
                                patch as isize, go, npix as isize, 1, S::zero(),
                                &mut dcols, npix as isize, 1);
                            col2im(&dcols, geom, dx.row_mut(n));
                        }
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, dw);
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::AvgPool2 { a, c, h, w } => {
                    let (r, cols) = self.shape(*a);
                    let (oh, ow) = (h / 2, w / 2);
                    let q = S::c(0.25);
                    let mut g = Tensor::zeros(r, cols);
                    for n in 0..r {
                        let go = gout.row(n);
                        let gi = g.row_mut(n);
                        for ch in 0..*c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let v = q * go[(ch * oh + y) * ow + xx];
                                    let base = (ch * h + 2 * y) * w + 2 * xx;
                                    gi[base] += v;
                                    gi[base + 1] += v;
                                    gi[base + w] += v;
                                    gi[base + w + 1] += v;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, g);
                }
            }
        }
        Grads { grads }
    }
}
