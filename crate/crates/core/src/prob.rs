//! Cosine similarity and diagonal Gaussian densities, both on plain slices
//! and as differentiable graph ops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{LOG_SIGMA_MAX, LOG_SIGMA_MIN};

pub fn cosine_similarity<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("lengths {} and {}", u.len(), v.len())));
    }
    let dot: S = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu = u.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nv = v.iter().map(|&a| a * a).sum::<S>().sqrt();
    if nu == S::zero() || nv == S::zero() {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).max(-S::one()).min(S::one()))
}

/// `sum_i [-ln(2 pi)/2 - ln sigma_i - (x_i - mu_i)^2 / (2 sigma_i^2)]`.
pub fn diag_gaussian_log_prob<S: Scalar>(x: &[S], mu: &[S], log_sigma: &[S]) -> Result<S> {
    if x.len() != mu.len() || x.len() != log_sigma.len() {
        return Err(Error::Shape("gaussian argument lengths differ".into()));
    }
    let half_ln_2pi = S::c(0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok(x.iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) * (-ls).exp();
            -half_ln_2pi - ls - S::c(0.5) * z * z
        })
        .sum())
}

/// `mu + exp(log_sigma) * eps`.
pub fn sample_diag_gaussian<S: Scalar>(mu: &[S], log_sigma: &[S], eps: &[S]) -> Result<Vec<S>> {
    if mu.len() != log_sigma.len() || mu.len() != eps.len() {
        return Err(Error::Shape("gaussian argument lengths differ".into()));
    }
    Ok(mu
        .iter()
        .zip(log_sigma)
        .zip(eps)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect())
}

pub fn standard_normal<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<S> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::c(z)
            })
            .collect(),
    )
}

/// Clamp a raw log-sigma node to the supported range.
pub fn clamp_log_sigma<S: Scalar>(g: &mut Graph<S>, log_sigma: Var) -> Var {
    g.clamp(log_sigma, S::c(LOG_SIGMA_MIN), S::c(LOG_SIGMA_MAX))
}

/// Row-wise diagonal Gaussian log density, `[rows x 1]`.
pub fn gaussian_log_prob_rows<S: Scalar>(g: &mut Graph<S>, x: Var, mu: Var, log_sigma: Var) -> Var {
    let d = g.shape(x).1;
    let diff = g.sub(x, mu);
    let neg = g.neg(log_sigma);
    let inv = g.exp(neg);
    let z = g.mul(diff, inv);
    let z2 = g.square(z);
    let half = g.scale(z2, S::c(0.5));
    let terms = g.add(half, log_sigma);
    let s = g.row_sum(terms);
    let s = g.neg(s);
    g.add_scalar(s, S::c(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Reparameterized sample `mu + exp(log_sigma) * eps`.
pub fn reparameterize<S: Scalar>(g: &mut Graph<S>, mu: Var, log_sigma: Var, eps: Var) -> Var {
    let sigma = g.exp(log_sigma);
    let noise = g.mul(sigma, eps);
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert_relative_eq!(cosine_similarity(&u, &u).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cosine_similarity(&u, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gaussian_closed_forms() {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let z32 = vec![0.0; 32];
        let lp = diag_gaussian_log_prob(&z32, &z32, &z32).unwrap();
        assert_relative_eq!(lp, -16.0 * ln2pi, epsilon = 1e-10);
        assert_relative_eq!(lp, -29.4060, epsilon = 1e-4);
        let lp1 = diag_gaussian_log_prob(&[0.5], &[0.5], &[0.0]).unwrap();
        assert_relative_eq!(lp1, -0.918939, epsilon = 1e-6);
        let lp2 = diag_gaussian_log_prob(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(lp2, -ln2pi - 1.0, epsilon = 1e-12);
        assert_relative_eq!(lp2, -2.8379, epsilon = 1e-4);
    }

    #[test]
    fn sampling_cases() {
        let mu = [0.7, -0.2];
        assert_eq!(sample_diag_gaussian(&mu, &[0.3, 0.1], &[0.0, 0.0]).unwrap(), mu.to_vec());
        assert_eq!(
            sample_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0], &[1.5, -0.5]).unwrap(),
            vec![1.5, -0.5]
        );
        let ln2 = 2f64.ln();
        let s = sample_diag_gaussian(&[1.0, 1.0], &[ln2, ln2], &[1.0, -1.0]).unwrap();
        assert_relative_eq!(s[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        // Simpson's rule over mu +- 8 sigma.
        let (mu, ls) = (0.4f64, 0.3f64);
        let sigma = ls.exp();
        let (a, b) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
        let n = 4000;
        let h = (b - a) / n as f64;
        let f = |x: f64| diag_gaussian_log_prob(&[x], &[mu], &[ls]).unwrap().exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn reparameterization_gradients_match_finite_differences() {
        let mu = Tensor::from_f64(1, 3, &[0.2, -0.4, 1.1]);
        let ls = Tensor::from_f64(1, 3, &[0.1, -0.3, 0.5]);
        let eps = Tensor::from_f64(1, 3, &[0.9, -1.3, 0.4]);
        let mut g = Graph::new();
        let (m, l) = (g.input(mu.clone()), g.input(ls.clone()));
        let e = g.constant(eps.clone());
        let y = reparameterize(&mut g, m, l, e);
        for i in 0..3 {
            // d y_i / d mu_i = 1; d y_i / d log_sigma_i = sigma_i * eps_i
            let pick = g.slice_cols(y, i, 1);
            let s = g.sum(pick);
            let grads = g.backward(s);
            let h = 1e-6;
            let f = |mu: &[f64], ls: &[f64]| sample_diag_gaussian(mu, ls, &eps.data).unwrap()[i];
            let mut mp = mu.data.clone();
            mp[i] += h;
            let mut mm = mu.data.clone();
            mm[i] -= h;
            let fd_mu = (f(&mp, &ls.data) - f(&mm, &ls.data)) / (2.0 * h);
            let mut lp = ls.data.clone();
            lp[i] += h;
            let mut lm = ls.data.clone();
            lm[i] -= h;
            let fd_ls = (f(&mu.data, &lp) - f(&mu.data, &lm)) / (2.0 * h);
            let gm = grads.wrt(m).unwrap().data[i];
            let gl = grads.wrt(l).unwrap().data[i];
            assert_relative_eq!(gm, 1.0, max_relative = 1e-3);
            assert_relative_eq!(fd_mu, gm, max_relative = 1e-3);
            assert_relative_eq!(fd_ls, gl, max_relative = 1e-3);
            assert_relative_eq!(gl, ls.data[i].exp() * eps.data[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn graph_log_prob_matches_slice_version() {
        let x = Tensor::<f64>::from_f64(2, 2, &[0.1, 0.5, -1.0, 2.0]);
        let mu = Tensor::from_f64(2, 2, &[0.0, 0.2, 0.3, 1.0]);
        let ls = Tensor::from_f64(2, 2, &[0.0, -0.5, 0.7, 0.2]);
        let mut g = Graph::new();
        let (xv, mv, lv) = (g.constant(x.clone()), g.constant(mu.clone()), g.constant(ls.clone()));
        let lp = gaussian_log_prob_rows(&mut g, xv, mv, lv);
        for r in 0..2 {
            let expect = diag_gaussian_log_prob(x.row(r), mu.row(r), ls.row(r)).unwrap();
            assert_relative_eq!(g.value(lp).data[r], expect, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!((c - cosine_similarity(&v, &u).unwrap()).abs() < 1e-12);
            let us: Vec<f64> = u.iter().map(|x| x * a).collect();
            let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((c - cosine_similarity(&us, &vs).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
