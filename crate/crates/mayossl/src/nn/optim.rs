//! Adam with decoupled weight decay, plus a cosine learning-rate schedule.

use crate::state::ModelState;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second-moment accumulators for one [`ModelState`].
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub t: u64,
}

impl AdamW {
    /// Apply one update. `lr_scale` multiplies the effective learning rate
    /// for this state (used for reduced-rate backbone fine-tuning; 0 leaves
    /// the state untouched). Frozen or gradient-less parameters are skipped.
    pub fn step(
        &self,
        opt: &mut OptimState,
        state: &mut ModelState,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr_scale: f64,
    ) {
        if lr_scale == 0.0 {
            return;
        }
        opt.t += 1;
        let t = opt.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * lr_scale;
        let frozen: Vec<String> = state.frozen_names().cloned().collect();
        for (name, theta) in state.params_mut() {
            if frozen.iter().any(|f| f == name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = opt
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            let v = opt
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let (b1, b2, eps, wd) = (bc1, bc2, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut *theta)
                .and(&*m)
                .and(&*v)
                .for_each(|th, &mi, &vi| {
                    let mhat = mi / b1;
                    let vhat = vi / b2;
                    *th -= lr * (mhat / (vhat.sqrt() + eps) + wd * *th);
                });
        }
    }
}

/// Half-cosine decay from `base` to `base * floor_frac` over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    let floor = base * floor_frac;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
