//! Numerical checks of the flow prior against independent oracles: exact
//! inversion, zero log-determinant, quadrature of a 2-D density and the
//! closed-form Gaussian KL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::flow::{Flow, FlowDims};
use crate::params::ParamStore;
use crate::posterior::{sample_posterior, PosteriorOut};
use crate::prior::{kl_loss, Prior, PriorCondition, PriorDims};
use crate::prob::{gaussian_log_prob_rows, standard_normal};
use crate::tensor::Tensor;

const AUDIO: usize = 3;
const STYLE: usize = 5;

fn flow_dims(d: usize) -> FlowDims {
    FlowDims {
        motion_dim: d,
        audio_dim: AUDIO,
        hidden: 6,
        scale_bound: 2.0,
    }
}

fn prior_dims(d: usize) -> PriorDims {
    PriorDims {
        style_dim: STYLE,
        audio_dim: AUDIO,
        audio_proj: 4,
        hidden: 6,
        motion_dim: d,
        condition: PriorCondition::Base,
    }
}

/// Overwrite every flow parameter with `scale * N(0, 1)`.
pub fn randomize_flow(store: &mut ParamStore<f64>, flow: &Flow, rng: &mut impl Rng, scale: f64) {
    for step in &flow.steps {
        for id in [step.log_scale, step.bias, step.head.w, step.head.b, step.lstm.wx, step.lstm.wh, step.lstm.b] {
            let v = store.value(id);
            *store.value_mut(id) = standard_normal::<f64>(rng, v.rows, v.cols).map(|x| scale * x);
        }
    }
}

/// Overwrite the prior's initial and output heads with `scale * N(0, 1)`.
pub fn randomize_prior(store: &mut ParamStore<f64>, prior: &Prior, rng: &mut impl Rng, scale: f64) {
    for id in [prior.init.w, prior.init.b, prior.head.w, prior.head.b] {
        let v = store.value(id);
        *store.value_mut(id) = standard_normal::<f64>(rng, v.rows, v.cols).map(|x| scale * x);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSweep {
    pub trials: usize,
    pub max_round_trip: f64,
    pub max_log_det: f64,
    /// Trials whose forward map moved the input by less than 1e-3.
    pub identity_like: usize,
}

/// Round trip and log-determinant over `trials` random flows and inputs,
/// with motion width 2..=16, 1..=4 steps, up to 8 frames and 3 sequences.
pub fn flow_sweep(trials: usize, seed: u64) -> FlowSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FlowSweep {
        trials,
        max_round_trip: 0.0,
        max_log_det: 0.0,
        identity_like: 0,
    };
    for _ in 0..trials {
        let d = rng.random_range(2..=16);
        let steps = rng.random_range(1..=4);
        let (t, b) = (rng.random_range(1..=8), rng.random_range(1..=3));
        let mut store = ParamStore::<f64>::new();
        let flow = Flow::new(&mut store, "f", flow_dims(d), steps, &mut rng).expect("width at least two");
        let scale = rng.random_range(0.2..1.0);
        randomize_flow(&mut store, &flow, &mut rng, scale);
        let m = standard_normal::<f64>(&mut rng, t * b, d).map(|v| 2.0 * v);
        let a = standard_normal::<f64>(&mut rng, t * b, AUDIO);
        let mut g = Graph::new();
        let (mv, av) = (g.constant(m.clone()), g.constant(a));
        let (z, ld) = flow.forward(&mut g, &store, mv, av, b);
        let back = flow.inverse(&mut g, &store, z, av, b);
        let moved = g.value(z).data.iter().zip(&m.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if moved < 1e-3 {
            out.identity_like += 1;
        }
        let err = g.value(back).data.iter().zip(&m.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        out.max_round_trip = out.max_round_trip.max(err);
        out.max_log_det = out.max_log_det.max(g.item(ld).abs());
    }
    out
}

/// Midpoint-rule mass of a single-frame 2-D prior with a random 4-step flow,
/// over `[-12, 12]^2` at spacing 0.04.
pub fn density_mass_2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let prior = Prior::new(&mut store, "p", prior_dims(2), &mut rng);
    let flow = Flow::new(&mut store, "f", flow_dims(2), 4, &mut rng).expect("width two");
    randomize_flow(&mut store, &flow, &mut rng, 0.5);
    randomize_prior(&mut store, &prior, &mut rng, 0.3);
    let (lo, hi, h) = (-12.0, 12.0, 0.04);
    let n = ((hi - lo) / h) as usize;
    let mut pts = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            pts.push(lo + (i as f64 + 0.5) * h);
            pts.push(lo + (j as f64 + 0.5) * h);
        }
    }
    let b = n * n;
    let a: Vec<f64> = (0..AUDIO).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w0: Vec<f64> = (0..STYLE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let mv = g.constant(Tensor::from_vec(b, 2, pts));
    let av = g.constant(Tensor::from_vec(b, AUDIO, a.repeat(b)));
    let wv = g.constant(Tensor::from_vec(b, STYLE, w0.repeat(b)));
    let (z, ld) = flow.forward(&mut g, &store, mv, av, b);
    let (mu, ls) = prior.base_params(&mut g, &store, z, av, wv, b);
    let rows = gaussian_log_prob_rows(&mut g, z, mu, ls);
    // `ld` is the batch mean; every row carries the same per-sample value.
    let ld = g.item(ld);
    g.value(rows).data.iter().map(|lp| (lp + ld).exp()).sum::<f64>() * h * h
}

/// Monte-Carlo mean and standard error of the single-sample KL estimator for
/// `q = N(mu_q, 1)` against a 1-D prior with base `N(mu_p, 1)` and no flow.
/// The closed form is `(mu_q - mu_p)^2 / 2`.
pub fn kl_calibration(mu_q: f64, mu_p: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let prior = Prior::new(&mut store, "p", prior_dims(1), &mut rng);
    let flow = Flow::new(&mut store, "f", flow_dims(1), 0, &mut rng).expect("empty flow");
    store.value_mut(prior.init.b).data[0] = mu_p;
    let eps = standard_normal::<f64>(&mut rng, n, 1);
    let mut vals = Vec::with_capacity(n);
    for &e in &eps.data {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::full(1, 1, mu_q));
        let log_sigma = g.constant(Tensor::zeros(1, 1));
        let post = PosteriorOut { mu, log_sigma };
        let ev = g.constant(Tensor::full(1, 1, e));
        let m = sample_posterior(&mut g, post, ev);
        let a = g.constant(Tensor::zeros(1, AUDIO));
        let w0 = g.constant(Tensor::zeros(1, STYLE));
        let kl = kl_loss(&mut g, &store, post, m, &prior, &flow, a, w0, 1);
        vals.push(g.item(kl));
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
