//! AdamW with decoupled weight decay, plus the warmup/cosine LR schedule
//! used by the training loops.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay coefficient; applied as `p -= lr * wd * p`.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW state. First/second moment buffers are aligned with the store's
/// parameter order; a missing gradient is treated as zero (moments still
/// decay, weight decay still applies).
pub struct Adam {
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        Self { t: 0, m, v }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Optimizer(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        if self.m.len() != store.len() {
            return Err(Error::Optimizer(format!(
                "optimizer state for {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.values_mut(id);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + cfg.eps as f64);
                p[i] -= cfg.lr * (update as f32 + cfg.weight_decay * p[i]);
                if !p[i].is_finite() {
                    return Err(Error::Optimizer(format!(
                        "non-finite value in {} after update {}",
                        store.name(id),
                        self.t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then cosine decay to zero
/// at `total` steps. `step` is zero-based.
pub fn warmup_cosine_lr(base_lr: f32, warmup: usize, total: usize, step: usize) -> f32 {
    debug_assert!(total > 0);
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f32 / warmup as f32;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    (base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}
