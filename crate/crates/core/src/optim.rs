//! AdamW with a cosine learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ClearError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: usize,
}

impl AdamW {
    pub fn new(params: &BTreeMap<String, Var>, cfg: AdamWConfig) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in params {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(AdamW {
            cfg,
            params: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            moments,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.params {
            let p = var.as_tensor();
            let g = match grads.get(p) {
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            let (m, v) = self.moments.get_mut(name).expect("moments for every parameter");
            let p = p.detach();
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let update = ((&*m / bc1)? / ((&*v / bc2)?.sqrt()? + eps)?)?;
            let next = (&p - ((update + (&p * weight_decay)?)? * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        for (name, (m, v)) in &self.moments {
            ck.insert_tensor(&format!("adam.m.{name}"), m)?;
            ck.insert_tensor(&format!("adam.v.{name}"), v)?;
        }
        ck.meta.insert("adam_step".into(), self.step.into());
        Ok(())
    }

    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, (m, v)) in self.moments.iter_mut() {
            let dtype = m.dtype();
            *m = ck.tensor(&format!("adam.m.{name}"), dtype)?;
            *v = ck.tensor(&format!("adam.v.{name}"), dtype)?;
        }
        self.step = ck
            .meta
            .get("adam_step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ClearError::Checkpoint("missing adam_step".into()))? as usize;
        Ok(())
    }
}
