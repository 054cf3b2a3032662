//! AdamW with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::net::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update. Parameters without a gradient are treated as having zero gradient.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (slot, p) in params.values_mut().iter_mut().enumerate() {
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        match grads.get(slot) {
            Some(g) => {
                Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    *p = *p * decay - lr * update;
                });
            }
            None => {
                Zip::from(&mut *p).and(&mut *m).and(&mut *v).for_each(|p, m, v| {
                    *m *= cfg.beta1;
                    *v *= cfg.beta2;
                    let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    *p = *p * decay - lr * update;
                });
            }
        }
    }
}
