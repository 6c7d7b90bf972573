//! Central finite-difference checks of reverse-mode gradients in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::flow::{Flow, FlowDims};
use crate::manipulation::{gaussian_kernel, Manipulator, Smoother};
use crate::params::ParamStore;
use crate::perceptual::Perceptual;
use crate::posterior::{posterior_log_prob, sample_posterior, PosteriorBlock, PosteriorDims};
use crate::prior::{kl_loss, Prior, PriorCondition, PriorDims};
use crate::prob::standard_normal;
use crate::sync::SyncEncoders;
use crate::tensor::Tensor;
use crate::training::loss_sync;

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: String, fd: f64, an: f64) {
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err.max(self.max_rel_err);
            self.worst = format!("{what}: fd {fd:.6e} vs analytic {an:.6e}");
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn merge(mut self, o: GradCheck) -> Self {
        self.checked += o.checked;
        if o.max_rel_err > self.max_rel_err {
            self.max_rel_err = o.max_rel_err;
            self.worst = o.worst;
        }
        self
    }
}

fn picks(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Check every parameter of `store` at up to `per_param` entries.
pub fn check_params(
    store: &mut ParamStore<f64>,
    per_param: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    store.zero_grad();
    store.accumulate(&g, &grads);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = f(&mut g, s);
        g.item(l)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new();
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        for i in picks(store.value(id).len(), per_param, &mut rng) {
            let an = store.grad(id).data[i];
            let x = store.value(id).data[i];
            store.value_mut(id).data[i] = x + STEP;
            let lp = eval(store);
            store.value_mut(id).data[i] = x - STEP;
            let lm = eval(store);
            store.value_mut(id).data[i] = x;
            out.record(format!("{name}[{i}]"), (lp - lm) / (2.0 * STEP), an);
        }
    }
    store.zero_grad();
    out
}

/// Check the gradient with respect to each input tensor at up to
/// `per_input` entries.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    per_input: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let run = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars);
        (g, vars, l)
    };
    let (g, vars, l) = run(inputs);
    let grads = g.backward(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        for i in picks(inputs[k].len(), per_input, &mut rng) {
            let an = grads.wrt(*v).map_or(0.0, |t| t.data[i]);
            let x = inputs[k].data[i];
            work[k].data[i] = x + STEP;
            let (gp, _, lp) = run(&work);
            work[k].data[i] = x - STEP;
            let (gm, _, lm) = run(&work);
            work[k].data[i] = x;
            out.record(format!("input{k}[{i}]"), (gp.item(lp) - gm.item(lm)) / (2.0 * STEP), an);
        }
    }
    out
}

/// Add `N(0, scale^2)` noise to every parameter so zero-initialized heads
/// carry gradient signal.
pub fn perturb(store: &mut ParamStore<f64>, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let v = store.value_mut(id);
        let noise: Tensor<f64> = standard_normal(rng, v.rows, v.cols);
        for (a, n) in v.data.iter_mut().zip(&noise.data) {
            *a += scale * n;
        }
    }
}

/// Weighted sum with a fixed non-uniform probe so every output entry
/// matters.
fn probe_sum(g: &mut Graph<f64>, y: Var) -> Var {
    let (r, c) = g.shape(y);
    let p = g.constant(Tensor::from_vec(
        r,
        c,
        (0..r * c).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
    ));
    let m = g.mul(y, p);
    g.sum(m)
}

/// Named checks over the posterior, flow prior, manipulation, smoothing,
/// perceptual and sync paths.
pub fn suite(per_param: usize) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (t, b, d, da, dm) = (5, 2, 6, 3, 4);
    let w = standard_normal::<f64>(&mut rng, t * b, d);
    let a = standard_normal::<f64>(&mut rng, t * b, da);
    let eps = standard_normal::<f64>(&mut rng, t * b, dm);
    let mut out = Vec::new();

    // Posterior: reparameterized draw and its log density.
    let mut store = ParamStore::new();
    let post = PosteriorBlock::new(
        &mut store,
        "q",
        PosteriorDims {
            style_dim: d,
            audio_dim: da,
            stem: 5,
            stem_out: 4,
            audio_proj: 3,
            hidden: 5,
            motion_dim: dm,
        },
        &mut rng,
    );
    perturb(&mut store, 0.3, &mut rng);
    let f_post = |g: &mut Graph<f64>, s: &ParamStore<f64>, w: Var, a: Var| {
        let q = post.params(g, s, w, a, b);
        let e = g.constant(eps.clone());
        let m = sample_posterior(g, q, e);
        let lq = posterior_log_prob(g, q, m, b);
        let pm = probe_sum(g, m);
        g.add(lq, pm)
    };
    let pc = check_params(&mut store, per_param, 1, |g, s| {
        let (wv, av) = (g.constant(w.clone()), g.constant(a.clone()));
        f_post(g, s, wv, av)
    });
    let ic = check_inputs(&[w.clone(), a.clone()], per_param, 2, |g, v| f_post(g, &store, v[0], v[1]));
    out.push(("posterior", pc.merge(ic)));

    // Flow prior and the single-sample KL through it.
    for cond in [PriorCondition::Base, PriorCondition::Motion] {
        let mut store = ParamStore::new();
        let post = PosteriorBlock::new(
            &mut store,
            "q",
            PosteriorDims {
                style_dim: d,
                audio_dim: da,
                stem: 4,
                stem_out: 3,
                audio_proj: 2,
                hidden: 4,
                motion_dim: dm,
            },
            &mut rng,
        );
        let flow = Flow::new(
            &mut store,
            "f",
            FlowDims {
                motion_dim: dm,
                audio_dim: da,
                hidden: 4,
                scale_bound: 2.0,
            },
            2,
            &mut rng,
        )?;
        let prior = Prior::new(
            &mut store,
            "p",
            PriorDims {
                style_dim: d,
                audio_dim: da,
                audio_proj: 3,
                hidden: 5,
                motion_dim: dm,
                condition: cond,
            },
            &mut rng,
        );
        perturb(&mut store, 0.3, &mut rng);
        let f_kl = |g: &mut Graph<f64>, s: &ParamStore<f64>, m_in: Option<Var>| {
            let (wv, av) = (g.constant(w.clone()), g.constant(a.clone()));
            let q = post.params(g, s, wv, av, b);
            let m = match m_in {
                Some(m) => m,
                None => {
                    let e = g.constant(eps.clone());
                    sample_posterior(g, q, e)
                }
            };
            let w0 = g.slice_rows(wv, 0, b);
            kl_loss(g, s, q, m, &prior, &flow, av, w0, b)
        };
        let pc = check_params(&mut store, per_param, 3, |g, s| f_kl(g, s, None));
        let ic = check_inputs(std::slice::from_ref(&eps), per_param, 4, |g, v| f_kl(g, &store, Some(v[0])));
        out.push((
            match cond {
                PriorCondition::Base => "flow_prior_z",
                PriorCondition::Motion => "flow_prior_m",
            },
            pc.merge(ic),
        ));
    }

    // Manipulation.
    let (dd, cc) = (5, 4);
    let mut store = ParamStore::new();
    let man = Manipulator::new(&mut store, "k", dd, cc, 1.0, &mut rng);
    perturb(&mut store, 0.3, &mut rng);
    let wr = standard_normal::<f64>(&mut rng, 1, dd);
    let c = standard_normal::<f64>(&mut rng, 6, cc);
    let pc = check_params(&mut store, per_param, 5, |g, s| {
        let (wv, cv) = (g.constant(wr.clone()), g.constant(c.clone()));
        let y = man.forward(g, s, wv, cv);
        probe_sum(g, y)
    });
    let ic = check_inputs(&[wr.clone(), c.clone()], per_param, 6, |g, v| {
        let y = man.forward(g, &store, v[0], v[1]);
        probe_sum(g, y)
    });
    out.push(("manipulation", pc.merge(ic)));

    // Smoothing.
    let mut store = ParamStore::new();
    let sm = Smoother::new(&mut store, "s", 3, 4, gaussian_kernel(5, 1.0), 3, &mut rng);
    let x = standard_normal::<f64>(&mut rng, 7 * b, 3);
    let pc = check_params(&mut store, per_param, 7, |g, s| {
        let xv = g.constant(x.clone());
        let y = sm.forward(g, s, xv, b);
        probe_sum(g, y)
    });
    let ic = check_inputs(&[x], per_param, 8, |g, v| {
        let y = sm.forward(g, &store, v[0], b);
        probe_sum(g, y)
    });
    out.push(("smoothing", pc.merge(ic)));

    // Perceptual loss with respect to the generated image.
    let per = Perceptual::<f64>::new(8, 2, 3.0, 9)?;
    let img_a = standard_normal::<f64>(&mut rng, 2, 192).map(|v| 0.5 + 0.2 * v);
    let img_b = standard_normal::<f64>(&mut rng, 2, 192).map(|v| 0.5 + 0.2 * v);
    let ic = check_inputs(&[img_a], per_param * 4, 10, |g, v| {
        let bv = g.constant(img_b.clone());
        per.loss(g, v[0], bv).expect("matching shapes")
    });
    out.push(("perceptual", ic));

    // Sync loss through frozen encoders, with respect to generated frames.
    let cfg = ModelConfig {
        image_size: 8,
        sync_half_window: 1,
        lip_dim: 2,
        distractor_channels: 2,
        sync_conv_channels: 2,
        sync_hidden: 5,
        sync_embed: 4,
        ..ModelConfig::default()
    };
    let mut enc = SyncEncoders::<f64>::new(&cfg, 11);
    enc.freeze();
    let n = 2;
    let video = standard_normal::<f64>(&mut rng, n * 3, 192).map(|v| 0.5 + 0.2 * v);
    let audio = standard_normal::<f64>(&mut rng, n, 3 * cfg.audio_raw_dim());
    let ic = check_inputs(&[video, audio], per_param * 4, 12, |g, v| {
        loss_sync(g, &enc, v[0], v[1]).expect("matching shapes")
    });
    out.push(("sync_loss", ic));
    Ok(out)
}
