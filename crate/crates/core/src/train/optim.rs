//! Adam with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(param_count: usize, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// Applies one update in place and returns the pre-clipping gradient norm.
    /// Weight decay only touches parameters flagged for it.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[f32], lr: f64) -> Result<f64> {
        let total = store.scalar_count();
        if grads.len() != total || self.m.len() != total {
            return Err(Error::Shape(format!(
                "{} gradients, {} moments, {total} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let mut offset = 0;
        for entry in store.entries_mut() {
            let decay = if entry.decay { (lr * self.weight_decay) as f32 } else { 0.0 };
            for p in entry.tensor.data_mut() {
                let g = grads[offset] * scale as f32;
                let m = &mut self.m[offset];
                let v = &mut self.v[offset];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m as f64 / bc1;
                let vhat = *v as f64 / bc2;
                *p -= decay * *p;
                *p -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
                offset += 1;
            }
        }
        Ok(norm)
    }
}
