use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<ParamId, Matrix>,
    v: BTreeMap<ParamId, Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies `grads`, optionally rescaled by `scale`. Only parameters that
    /// are trainable in `store` are touched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Matrix>, scale: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                return Err(LynxError::invalid(format!("gradient for frozen parameter {}", store.name(id))));
            }
            if c.lr == 0.0 {
                continue;
            }
            let shape = g.shape();
            let m = self.m.entry(id).or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let v = self.v.entry(id).or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let p = store.value_mut(id);
            for k in 0..g.data().len() {
                let gk = g.data()[k] * scale;
                let mk = c.beta1 * m.data()[k] + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v.data()[k] + (1.0 - c.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= c.lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors named `m.<param>` and `v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Matrix)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (id, m) in &self.m {
            out.push((format!("m.{}", store.name(*id)), m.clone()));
            out.push((format!("v.{}", store.name(*id)), self.v[id].clone()));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, step: u64, tensors: &[(String, Matrix)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = step;
        for (name, t) in tensors {
            let (slot, pname) = match name.split_once('.') {
                Some(("m", rest)) => (&mut self.m, rest),
                Some(("v", rest)) => (&mut self.v, rest),
                _ => return Err(LynxError::Checkpoint(format!("unexpected optimizer tensor {name}"))),
            };
            let id = store
                .id(pname)
                .ok_or_else(|| LynxError::Checkpoint(format!("optimizer state for unknown parameter {pname}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(LynxError::Checkpoint(format!("optimizer state shape for {pname}")));
            }
            slot.insert(id, t.clone());
        }
        Ok(())
    }
}
