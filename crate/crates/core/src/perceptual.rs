//! Frozen multi-scale feature extractor used as a perceptual image distance.
//!
//! Frames are compared at full, half and quarter resolution; at each scale a
//! fixed random 3x3 convolution with LeakyReLU produces the features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const SCALES: usize = 3;

#[derive(Clone, Debug)]
pub struct Perceptual<S> {
    pub store: ParamStore<S>,
    convs: Vec<Conv2d>,
    size: usize,
    gain: f64,
}

impl<S: Scalar> Perceptual<S> {
    pub fn new(image_size: usize, channels: usize, gain: f64, seed: u64) -> Result<Self> {
        if !image_size.is_multiple_of(4) {
            return Err(Error::Config("image_size must be divisible by 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let convs = (0..SCALES)
            .map(|s| {
                let side = image_size >> s;
                let geom = ConvGeom {
                    in_c: 3,
                    in_h: side,
                    in_w: side,
                    out_c: channels,
                    k: 3,
                    stride: 1,
                    pad: 1,
                };
                Conv2d::new(&mut store, &format!("perceptual.scale{s}"), geom, &mut rng)
            })
            .collect();
        store.freeze();
        Ok(Perceptual {
            store,
            convs,
            size: image_size,
            gain,
        })
    }

    /// Feature maps of `x: [n x 3*H*W]` at each scale.
    pub fn features(&self, g: &mut Graph<S>, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(SCALES);
        let mut cur = x;
        for (s, conv) in self.convs.iter().enumerate() {
            if s > 0 {
                let side = self.size >> (s - 1);
                cur = g.avg_pool2(cur, 3, side, side);
            }
            let f = conv.forward(g, &self.store, cur);
            out.push(g.leaky_relu(f, LEAKY_SLOPE));
        }
        out
    }

    /// `gain * sum_s mean((P_s(a) - P_s(b))^2)`.
    pub fn loss(&self, g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
        }
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.sub(x, y);
            let sq = g.square(d);
            let m = g.mean(sq);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m),
            });
        }
        let total = total.expect("at least one scale");
        Ok(g.scale(total, S::c(self.gain)))
    }
}

/// Mean squared error over all elements.
pub fn loss_l2<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::standard_normal;
    use crate::tensor::Tensor;

    fn eval(p: &Perceptual<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = p.loss(&mut g, av, bv).unwrap();
        g.item(l)
    }

    #[test]
    fn perceptual_properties() {
        let p = Perceptual::<f64>::new(16, 4, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = standard_normal::<f64>(&mut rng, 2, 768).map(|v| 0.5 + 0.2 * v);
        assert_eq!(eval(&p, &a, &a), 0.0);
        for _ in 0..10 {
            let b = standard_normal::<f64>(&mut rng, 2, 768).map(|v| 0.5 + 0.2 * v);
            assert!(eval(&p, &a, &b) >= 0.0);
        }
        // Brighten a 4x4 block in every channel: it survives quarter pooling.
        let mut b = a.clone();
        for c in 0..3 {
            for y in 4..8 {
                for x in 8..12 {
                    b.data[c * 256 + y * 16 + x] += 0.3;
                }
            }
        }
        assert!(eval(&p, &a, &b) > 0.0);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b));
        let fa = p.features(&mut g, av);
        let fb = p.features(&mut g, bv);
        let diff = g.value(fa[2]).data.iter().zip(&g.value(fb[2]).data).any(|(x, y)| x != y);
        assert!(diff);
        assert!(Perceptual::<f64>::new(18, 4, 1.0, 3).is_err());
        let small = Tensor::zeros(2, 700);
        let mut g = Graph::new();
        let (av, sv) = (g.constant(a), g.constant(small));
        assert!(p.loss(&mut g, av, sv).is_err());
    }

    #[test]
    fn frozen_and_seeded() {
        let p = Perceptual::<f64>::new(16, 4, 1.0, 3).unwrap();
        let q = Perceptual::<f64>::new(16, 4, 1.0, 3).unwrap();
        assert!(p.store.is_frozen());
        assert_eq!(p.store.fingerprint(), q.store.fingerprint());
    }

    #[test]
    fn l2_closed_forms() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::from_f64(2, 2, &[2.0, 3.0, 4.0, 5.0]));
        let l = loss_l2(&mut g, a, b).unwrap();
        assert_eq!(g.item(l), 1.0);
        let l = loss_l2(&mut g, b, a).unwrap();
        assert_eq!(g.item(l), 1.0);
        let l = loss_l2(&mut g, a, a).unwrap();
        assert_eq!(g.item(l), 0.0);
    }
}
