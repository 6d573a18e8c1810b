//! Named parameter and buffer collections for model components.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use std::collections::{BTreeMap, BTreeSet};

/// A named collection of trainable parameters and non-gradient buffers
/// (EMA targets live in their own state; running statistics, queues, and
/// prototypes live in buffers). Iteration order is stable (sorted by name),
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    params: BTreeMap<String, ArrayD<f64>>,
    buffers: BTreeMap<String, ArrayD<f64>>,
    frozen: BTreeSet<String>,
    pub step: u64,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.buffers.get_mut(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: ArrayD<f64>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Exclude parameters matching `pred` from gradient updates.
    pub fn freeze<F: Fn(&str) -> bool>(&mut self, pred: F) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| pred(n))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    /// Check that `other` has exactly the same parameter names and shapes.
    pub fn check_same_params(&self, other: &ModelState) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::validation(format!(
                "parameter sets differ: {} vs {} entries",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, value) in &self.params {
            match other.params.get(name) {
                None => {
                    return Err(Error::validation(format!("parameter {name} missing")));
                }
                Some(o) if o.shape() != value.shape() => {
                    return Err(Error::validation(format!(
                        "parameter {name} shape mismatch: {:?} vs {:?}",
                        value.shape(),
                        o.shape()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.buffers.values())
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// EMA tracking: target <- m * target + (1 - m) * online, parameters only.
/// Gradients never flow here; this is a plain buffer-style update.
pub fn ema_update(target: &mut ModelState, online: &ModelState, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::validation(format!("ema momentum {m} outside [0,1]")));
    }
    target.check_same_params(online)?;
    for (name, tv) in target.params.iter_mut() {
        let ov = &online.params[name];
        tv.zip_mut_with(ov, |t, &o| *t = m * *t + (1.0 - m) * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};

    fn scalar_state(v: f64) -> ModelState {
        let mut s = ModelState::new();
        s.insert_param("w", arr1(&[v]).into_dyn());
        s
    }

    #[test]
    fn ema_endpoints() {
        // m = 1: target unchanged
        let mut t = scalar_state(0.0);
        let o = scalar_state(1.0);
        ema_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t.param("w").unwrap()[[0]], 0.0);
        // m = 0: target equals online
        ema_update(&mut t, &o, 0.0).unwrap();
        assert_eq!(t.param("w").unwrap()[[0]], 1.0);
    }

    #[test]
    fn ema_two_steps_hand_value() {
        // k0 = 0, q = 1, m = 0.9: after 2 updates, 1 - 0.9^2 = 0.19
        let mut t = scalar_state(0.0);
        let o = scalar_state(1.0);
        ema_update(&mut t, &o, 0.9).unwrap();
        ema_update(&mut t, &o, 0.9).unwrap();
        assert!((t.param("w").unwrap()[[0]] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn ema_closed_form_many_steps() {
        // after t updates: m^t * k0 + (1 - m^t) * q, within 1e-9
        for &steps in &[1u32, 5, 50] {
            let (k0, q, m) = (0.35f64, -1.25f64, 0.996f64);
            let mut target = scalar_state(k0);
            let online = scalar_state(q);
            for _ in 0..steps {
                ema_update(&mut target, &online, m).unwrap();
            }
            let expect = m.powi(steps as i32) * k0 + (1.0 - m.powi(steps as i32)) * q;
            assert!((target.param("w").unwrap()[[0]] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_rejects_mismatched_states() {
        let mut t = scalar_state(0.0);
        let mut o = scalar_state(1.0);
        o.insert_param("extra", ArrayD::zeros(IxDyn(&[2])));
        assert!(ema_update(&mut t, &o, 0.5).is_err());
    }

    #[test]
    fn freeze_marks_matching_params() {
        let mut s = ModelState::new();
        s.insert_param("encoder.w1", ArrayD::zeros(IxDyn(&[2])));
        s.insert_param("head.w2", ArrayD::zeros(IxDyn(&[2])));
        s.freeze(|n| n.starts_with("encoder."));
        assert!(s.is_frozen("encoder.w1"));
        assert!(!s.is_frozen("head.w2"));
    }
}
