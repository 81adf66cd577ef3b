use serde::{Deserialize, Serialize};

use super::param::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter at learning rate `lr`; gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_grouped(store, |_| lr)
    }

    /// Like [`AdamW::step`] with a per-group learning rate.
    pub fn step_grouped(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        for group in [ParamGroup::Backbone, ParamGroup::Transformer] {
            let r = lr(group);
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!("learning rate must be positive, got {r}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (group, p) in store.params_mut() {
            let lr = lr(group);
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                value[i] -= lr * c.weight_decay * value[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// Free-function form of a single AdamW update.
pub fn adamw_step(store: &mut ParamStore, optimizer: &mut AdamW, lr: f64) -> Result<()> {
    optimizer.step(store, lr)
}
