use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// L2 penalty added to the gradient; 0 disables it.
    pub weight_decay: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(Error::Contract(format!(
            "adam shapes disagree: param {:?}, grad {:?}, state {:?}/{:?}",
            param.shape(),
            grad.shape(),
            state.m.shape(),
            state.v.shape()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, w) in param.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i] + cfg.weight_decay * *w;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        *w -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient, in name order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.shape()));
            adam_step(p, g, state, &self.cfg)?;
        }
        Ok(())
    }
}
