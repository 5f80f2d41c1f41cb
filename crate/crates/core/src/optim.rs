//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self { config, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. Parameters that received no
    /// gradient this step still decay their moments, as with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = grads.get(id);
            if grad.is_none() && self.m[id.0].is_none() {
                continue;
            }
            let (rows, cols) = store.get(id).shape();
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let param = store.get_mut(id);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), param.data_mut());
            for k in 0..pd.len() {
                let g = grad.map_or(0.0, |g| g.data()[k]);
                md[k] = b1 * md[k] + (1.0 - b1) * g;
                vd[k] = b2 * vd[k] + (1.0 - b2) * g * g;
                pd[k] -= lr * (md[k] / c1) / ((vd[k] / c2).sqrt() + eps);
            }
        }
    }
}
