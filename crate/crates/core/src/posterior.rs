//! Causal recurrent posterior over motion latents, one block per edited
//! style layer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{Linear, Lstm, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::prob::{clamp_log_sigma, gaussian_log_prob_rows, reparameterize};
use crate::scalar::Scalar;

/// Sizes of one posterior block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorDims {
    pub style_dim: usize,
    pub audio_dim: usize,
    pub stem: usize,
    pub stem_out: usize,
    pub audio_proj: usize,
    pub hidden: usize,
    pub motion_dim: usize,
}

#[derive(Clone, Debug)]
pub struct PosteriorBlock {
    pub dims: PosteriorDims,
    stem1: Linear,
    stem2: Linear,
    audio_proj: Linear,
    pub lstm: Lstm,
    pub head: Linear,
}

/// Graph nodes of a posterior over a time-major batch, each `[T*B x d_m]`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorOut {
    pub mu: Var,
    pub log_sigma: Var,
}

impl PosteriorBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dims: PosteriorDims, rng: &mut impl Rng) -> Self {
        let stem1 = Linear::new(store, &format!("{name}.stem1"), dims.style_dim, dims.stem, rng);
        let stem2 = Linear::new(store, &format!("{name}.stem2"), dims.stem, dims.stem_out, rng);
        let audio_proj = Linear::new(store, &format!("{name}.audio"), dims.audio_dim, dims.audio_proj, rng);
        let lstm = Lstm::new(
            store,
            &format!("{name}.lstm"),
            dims.stem_out + dims.audio_proj,
            dims.hidden,
            rng,
        );
        let head = Linear::new(store, &format!("{name}.head"), dims.hidden, 2 * dims.motion_dim, rng);
        PosteriorBlock {
            dims,
            stem1,
            stem2,
            audio_proj,
            lstm,
            head,
        }
    }

    /// Gaussian parameters for every frame of `w: [T*B x D]` (this block's
    /// style layer) and `a: [T*B x d_a]`. Frame t depends on frames `<= t`.
    pub fn params<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        w: Var,
        a: Var,
        batch: usize,
    ) -> PosteriorOut {
        let h = self.stem1.forward(g, store, w);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.stem2.forward(g, store, h);
        let h = g.tanh(h);
        let ap = self.audio_proj.forward(g, store, a);
        let x = g.concat_cols(&[h, ap]);
        let hs = self.lstm.run(g, store, x, batch);
        let out = self.head.forward(g, store, hs);
        let dm = self.dims.motion_dim;
        let mu = g.slice_cols(out, 0, dm);
        let ls = g.slice_cols(out, dm, dm);
        PosteriorOut {
            mu,
            log_sigma: clamp_log_sigma(g, ls),
        }
    }
}

/// `m = mu + sigma * eps`.
pub fn sample_posterior<S: Scalar>(g: &mut Graph<S>, post: PosteriorOut, eps: Var) -> Var {
    reparameterize(g, post.mu, post.log_sigma, eps)
}

/// Per-sequence `sum_t log q(m_t)`, averaged over the batch.
pub fn posterior_log_prob<S: Scalar>(g: &mut Graph<S>, post: PosteriorOut, m: Var, batch: usize) -> Var {
    let rows = gaussian_log_prob_rows(g, m, post.mu, post.log_sigma);
    let s = g.sum(rows);
    g.scale(s, S::c(1.0 / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{diag_gaussian_log_prob, standard_normal};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> PosteriorDims {
        PosteriorDims {
            style_dim: 6,
            audio_dim: 3,
            stem: 5,
            stem_out: 4,
            audio_proj: 3,
            hidden: 7,
            motion_dim: 4,
        }
    }

    fn eval(block: &PosteriorBlock, store: &ParamStore<f64>, w: &Tensor<f64>, a: &Tensor<f64>, b: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let (wv, av) = (g.constant(w.clone()), g.constant(a.clone()));
        let p = block.params(&mut g, store, wv, av, b);
        (g.value(p.mu).clone(), g.value(p.log_sigma).clone())
    }

    #[test]
    fn zero_head_gives_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = PosteriorBlock::new(&mut store, "q", dims(), &mut rng);
        for id in [block.head.w, block.head.b, block.lstm.wx, block.lstm.wh, block.lstm.b] {
            let v = store.value_mut(id);
            *v = Tensor::zeros(v.rows, v.cols);
        }
        let w = standard_normal(&mut rng, 12, 6);
        let a = standard_normal(&mut rng, 12, 3);
        let (mu, ls) = eval(&block, &store, &w, &a, 3);
        assert!(mu.data.iter().chain(&ls.data).all(|&v| v == 0.0));
    }

    #[test]
    fn causal_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = PosteriorBlock::new(&mut store, "q", dims(), &mut rng);
        let (t, b) = (8, 2);
        let w = standard_normal(&mut rng, t * b, 6);
        let a = standard_normal(&mut rng, t * b, 3);
        let base = eval(&block, &store, &w, &a, b);
        assert_eq!(base, eval(&block, &store, &w, &a, b));
        for cut in 0..t {
            let (mut w2, mut a2) = (w.clone(), a.clone());
            for r in (cut + 1) * b..t * b {
                w2.row_mut(r).iter_mut().for_each(|v| *v += 1.7);
                a2.row_mut(r).iter_mut().for_each(|v| *v -= 0.9);
            }
            let p = eval(&block, &store, &w2, &a2, b);
            let n = (cut + 1) * b * 4;
            assert_eq!(p.0.data[..n], base.0.data[..n]);
            assert_eq!(p.1.data[..n], base.1.data[..n]);
        }
    }

    #[test]
    fn log_prob_and_sampling_closed_forms() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(4, 16));
        let ls = g.constant(Tensor::zeros(4, 16));
        let post = PosteriorOut { mu, log_sigma: ls };
        let lp = posterior_log_prob(&mut g, post, mu, 1);
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((g.item(lp) - 4.0 * (-8.0 * ln2pi)).abs() < 1e-9);
        assert!((g.item(lp) + 58.81).abs() < 0.01);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu_t = standard_normal::<f64>(&mut rng, 1, 5);
        let ls_t = standard_normal::<f64>(&mut rng, 1, 5).map(|v| 0.3 * v);
        let x_t = standard_normal::<f64>(&mut rng, 1, 5);
        let mut g = Graph::<f64>::new();
        let (mu, ls, x) = (g.constant(mu_t.clone()), g.constant(ls_t.clone()), g.constant(x_t.clone()));
        let lp = posterior_log_prob(&mut g, PosteriorOut { mu, log_sigma: ls }, x, 1);
        let expect = diag_gaussian_log_prob(&x_t.data, &mu_t.data, &ls_t.data).unwrap();
        assert!((g.item(lp) - expect).abs() < 1e-12);

        let zero = g.constant(Tensor::zeros(1, 5));
        let m = sample_posterior(&mut g, PosteriorOut { mu, log_sigma: ls }, zero);
        assert_eq!(g.value(m), &mu_t);
    }

    #[test]
    fn entropy_oracle() {
        // E[-log q] over q's own samples equals the Gaussian entropy.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, d) = (3usize, 4usize);
        let mu_t = standard_normal::<f64>(&mut rng, t, d);
        let ls_t = standard_normal::<f64>(&mut rng, t, d).map(|v| 0.5 * v);
        let n = 10_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = standard_normal::<f64>(&mut rng, t, d);
            let mut g = Graph::new();
            let (mu, ls, e) = (g.constant(mu_t.clone()), g.constant(ls_t.clone()), g.constant(eps));
            let post = PosteriorOut { mu, log_sigma: ls };
            let m = sample_posterior(&mut g, post, e);
            let lp = posterior_log_prob(&mut g, post, m, 1);
            vals.push(-g.item(lp));
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let half_ln_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let entropy = (t * d) as f64 * half_ln_2pi_e + ls_t.sum();
        assert!((mean - entropy).abs() < 3.0 * se, "{mean} vs {entropy} (se {se})");
    }

    #[test]
    fn mean_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let mu = g.input(Tensor::from_f64(2, 2, &[0.1, 0.2, 0.3, 0.4]));
        let ls = g.constant(Tensor::from_f64(2, 2, &[0.5, -0.5, 0.0, 1.0]));
        let eps = g.constant(Tensor::from_f64(2, 2, &[1.0, -1.0, 0.3, 2.0]));
        let m = sample_posterior(&mut g, PosteriorOut { mu, log_sigma: ls }, eps);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.wrt(mu).unwrap().data.iter().all(|&v| v == 1.0));
    }
}
