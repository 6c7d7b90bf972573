//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Grads, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// An ordered collection of named tensors. Insertion order is stable and is
/// the serialization order.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    params: Vec<Param<S>>,
    index: HashMap<String, ParamId>,
    frozen: bool,
}

impl<S: Clone> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows, value.cols);
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Add the gradients computed on `graph` into the stored gradients.
    pub fn accumulate(&mut self, graph: &Graph<S>, grads: &Grads<S>) {
        if self.frozen {
            return;
        }
        for (id, var) in graph.param_nodes(self.uid) {
            if let Some(g) = grads.wrt(var) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|&g| g * g)
            .sum::<S>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: S) {
        for p in &mut self.params {
            p.grad.scale_assign(s);
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out.frozen = self.frozen;
        out
    }

    /// Order-sensitive content hash of all parameter values.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            buf.clear();
            for &v in &p.value.data {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Copy values from `other` by name; every name must match in shape.
    pub fn load_values(&mut self, other: &[(String, Tensor<S>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, t) in other {
            let id = self
                .get(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.value(id).shape() != t.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            *self.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Glorot-style uniform initialization for a `[fan_in x fan_out]` weight.
pub fn init_uniform<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| S::c(rng.random_range(-bound..bound)))
            .collect(),
    )
}

pub fn init_normal<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::c(z * std)
            })
            .collect(),
    )
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || {
            store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows, p.value.cols))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn update(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if store.frozen {
            return Err(Error::Contract(
                "parameter update requested on a frozen parameter store".into(),
            ));
        }
        self.step += 1;
        let (b1, b2) = (S::c(self.beta1), S::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = S::c(self.lr * c2.sqrt() / c1);
        let eps = S::c(self.eps * c2.sqrt());
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mm), vv) in p
                .value
                .data
                .iter_mut()
                .zip(&p.grad.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mm = b1 * *mm + (S::one() - b1) * g;
                *vv = b2 * *vv + (S::one() - b2) * g * g;
                *w -= lr * *mm / (vv.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
