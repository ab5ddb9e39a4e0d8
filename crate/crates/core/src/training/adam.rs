//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One update of every trainable parameter. Parameters without an entry in
/// `grads` are treated as having zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some(name) = grads.keys().find(|k| params.get(k).is_err()) {
        return Err(Error::MissingParameter(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = params.get_mut(&name)?;
        let shape = p.shape().to_vec();
        if let Some(g) = grads.get(&name) {
            if g.shape() != shape.as_slice() {
                return Err(Error::shape("adam_step", g.shape(), &shape));
            }
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
            return Err(Error::shape("adam_step", m.shape(), &shape));
        }
        let g = grads.get(&name);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = cfg.beta1 * m.data()[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = T::from_f64(mi);
            v.data_mut()[i] = T::from_f64(vi);
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            let pi = p.data()[i].as_f64() - update;
            p.data_mut()[i] = T::from_f64(pi);
        }
    }
    Ok(())
}
