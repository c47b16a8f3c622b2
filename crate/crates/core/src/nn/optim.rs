use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::param::Module;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment estimates are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update from the gradients accumulated in `m`. Fails without
    /// touching anything if `m` holds a frozen parameter.
    pub fn step(&mut self, m: &mut dyn Module<T>) -> Result<()> {
        let mut frozen = None;
        m.visit_params(&mut |p| {
            if p.is_frozen() && frozen.is_none() {
                frozen = Some(p.name.clone());
            }
        });
        if let Some(name) = frozen {
            return Err(Error::FrozenParameter(name));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let lr = T::c(c.learning_rate);
        let (bc1, bc2, eps) = (T::c(bc1), T::c(bc2), T::c(c.eps));
        let moments = &mut self.moments;
        m.visit_params_mut(&mut |p| {
            let (mt, vt) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(mt)
                .and(vt)
                .for_each(|w, &g, m1, v2| {
                    *m1 = b1 * *m1 + (T::one() - b1) * g;
                    *v2 = b2 * *v2 + (T::one() - b2) * g * g;
                    let mhat = *m1 / bc1;
                    let vhat = *v2 / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        });
        Ok(())
    }
}
