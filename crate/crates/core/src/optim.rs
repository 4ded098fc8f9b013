//! Adaptive-moment gradient descent and batched gradient accumulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Frozen parameters are never touched, even if a
    /// gradient for them is supplied.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let (b1, b2) = (T::c(self.cfg.beta1), T::c(self.cfg.beta2));
        let lr = T::c(self.cfg.lr);
        let eps = T::c(self.cfg.eps);
        let wd = T::c(self.cfg.lr * self.cfg.weight_decay);
        let (bc1, bc2) = (T::c(bc1), T::c(bc2));
        for (&id, g) in grads {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adam", p.value.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                values[i] = values[i] - lr * mh / (vh.sqrt() + eps) - wd * values[i];
            }
        }
        Ok(())
    }
}

/// Average per-sample gradient maps, summing in slice order so the result
/// does not depend on how the samples were computed.
pub fn average_grads<T: Real>(items: Vec<BTreeMap<ParamId, Tensor<T>>>) -> BTreeMap<ParamId, Tensor<T>> {
    let n = items.len();
    let mut acc: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
    for map in items {
        for (id, g) in map {
            match acc.get_mut(&id) {
                None => {
                    acc.insert(id, g);
                }
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let inv = T::c(1.0 / n.max(1) as f64);
    for g in acc.values_mut() {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    acc
}
