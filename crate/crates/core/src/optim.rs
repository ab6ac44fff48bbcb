//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moments are kept per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Decay applies to matrices and higher-rank tensors only;
    /// biases, norms' scales and 1-D embeddings are not decayed.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return invalid(format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let decay = if t.shape().len() >= 2 { weight_decay } else { 0.0 };
            let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let pv = *p as f64;
                *p = (pv - lr * (upd + decay * pv)) as f32;
            }
        }
        Ok(())
    }
}

/// `lr(s) = min + (peak - min) (1 + cos(pi s / total)) / 2`, clamped at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(peak: f64, min: f64, total_steps: u64) -> Result<Self> {
        if !(peak >= min && min >= 0.0) {
            return invalid(format!("learning rates need peak >= min >= 0, got {peak} / {min}"));
        }
        Ok(Self { peak, min, total_steps })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.peak;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
