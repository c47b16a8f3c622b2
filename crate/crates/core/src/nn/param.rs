use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tensor::Real;
use crate::error::{Error, Result};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / fully connected weights: `N(0, 0.02)`.
    Weight,
    /// Additive offsets: zero.
    Bias,
    /// Batch-norm gain: `N(1, 0.02)`.
    Scale,
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> Self {
        let value = match kind {
            ParamKind::Scale => ArrayD::from_elem(IxDyn(shape), T::one()),
            _ => ArrayD::zeros(IxDyn(shape)),
        };
        Self {
            name: name.into(),
            kind,
            grad: ArrayD::zeros(IxDyn(shape)),
            value,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Accumulates `g` into the gradient; gradients reaching a frozen
    /// parameter are dropped.
    pub fn accumulate(&mut self, g: &ArrayD<T>) {
        if !self.frozen {
            self.grad += g;
        }
    }
}

/// Anything that owns parameters (and optionally non-trainable buffers).
pub trait Module<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Running statistics and other state that is saved but never optimized.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &ArrayD<T>)) {}

    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {}
}

pub fn zero_grad<T: Real>(m: &mut dyn Module<T>) {
    m.visit_params_mut(&mut |p| p.grad.fill(T::zero()));
}

pub fn param_count<T: Real>(m: &dyn Module<T>) -> usize {
    let mut n = 0;
    m.visit_params(&mut |p| n += p.len());
    n
}

pub fn freeze_all<T: Real>(m: &mut dyn Module<T>) {
    m.visit_params_mut(&mut |p| p.freeze());
}

/// Draws every weight from `N(0, std)` (gains from `N(1, std)`), zeroes
/// biases. Parameters are visited in declaration order, so the result depends
/// only on the seed and the architecture.
pub fn init_weights<T: Real>(m: &mut dyn Module<T>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    m.visit_params_mut(&mut |p| match p.kind {
        ParamKind::Bias => p.value.fill(T::zero()),
        ParamKind::Weight => p.value.mapv_inplace(|_| T::c(normal.sample(&mut rng))),
        ParamKind::Scale => p.value.mapv_inplace(|_| T::c(1.0 + normal.sample(&mut rng))),
    });
}

/// Parameters keyed by name.
pub fn named_params<T: Real>(m: &dyn Module<T>) -> BTreeMap<String, ArrayD<T>> {
    let mut out = BTreeMap::new();
    m.visit_params(&mut |p| {
        out.insert(p.name.clone(), p.value.clone());
    });
    out
}

pub fn named_buffers<T: Real>(m: &dyn Module<T>) -> BTreeMap<String, ArrayD<T>> {
    let mut out = BTreeMap::new();
    m.visit_buffers(&mut |name, b| {
        out.insert(name.to_string(), b.clone());
    });
    out
}

/// Copies values from `src` into the module. Every parameter and buffer must
/// be present with the right shape.
pub fn load_named<T: Real>(
    m: &mut dyn Module<T>,
    params: &BTreeMap<String, ArrayD<T>>,
    buffers: &BTreeMap<String, ArrayD<T>>,
) -> Result<()> {
    let mut err = None;
    m.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match params.get(&p.name) {
            Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
            Some(v) => {
                err = Some(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Format(format!("missing parameter `{}`", p.name))),
        }
    });
    m.visit_buffers_mut(&mut |name, b| {
        if err.is_some() {
            return;
        }
        match buffers.get(name) {
            Some(v) if v.shape() == b.shape() => b.assign(v),
            _ => err = Some(Error::Format(format!("missing or misshaped buffer `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// SHA-256 over names, shapes and little-endian values of all parameters and
/// buffers.
pub fn param_hash<T: Real>(m: &dyn Module<T>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    let mut feed = |name: &str, v: &ArrayD<T>| {
        buf.clear();
        buf.extend_from_slice(name.as_bytes());
        for d in v.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in v.iter() {
            x.write_le(&mut buf);
        }
        hasher.update(&buf);
    };
    m.visit_params(&mut |p| feed(&p.name, &p.value));
    m.visit_buffers(&mut |n, b| feed(n, b));
    hex::encode(hasher.finalize())
}

/// Squared L2 norm of the gradients, handy for tests.
pub fn grad_norm_sq<T: Real>(m: &dyn Module<T>) -> f64 {
    let mut acc = 0.0;
    m.visit_params(&mut |p| acc += p.grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>());
    acc
}
