//! AdamW with decoupled weight decay and a per-phase cosine schedule.

use serde::{Deserialize, Serialize};

/// Cosine decay from `peak` to `floor` over `total` steps.
pub fn cosine_lr(peak: f64, floor: f64, step: u64, total: u64) -> f32 {
    if total == 0 {
        return floor as f32;
    }
    let t = (step.min(total) as f64) / total as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    (floor + (peak - floor) * cos) as f32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
        }
    }

    /// One update. `decay_mask` selects parameters that receive decoupled
    /// weight decay; `frozen` indices get neither update nor moment change.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, decay_mask: &[bool], frozen: &[usize]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut skip = vec![false; params.len()];
        for &idx in frozen {
            skip[idx] = true;
        }
        for i in 0..params.len() {
            if skip[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + self.eps);
            if decay_mask[i] {
                update += self.weight_decay * params[i];
            }
            params[i] -= lr * update;
        }
    }
}
