//! AdamW with decoupled weight decay and checkpointable state.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this parameter has received.
    pub t: u64,
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Updates every trainable parameter that received a gradient.
    /// Parameters absent from `grads` (not reached by the loss) are left
    /// untouched, weight decay included.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let entry = match self.state.get_mut(name) {
                Some(e) => e,
                None => self.state.entry(name.to_string()).or_insert(Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    t: 0,
                }),
            };
            entry.t += 1;
            let t = entry.t as i32;
            entry.m = ((&entry.m * beta1)? + (g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&entry.m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&entry.v / (1.0 - beta2.powi(t)))?;
            let decayed = (var.as_tensor().detach() * (1.0 - lr * weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Moments>) {
        self.state = state;
    }
}
