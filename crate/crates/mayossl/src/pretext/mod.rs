//! Label-free pretext training: shared batching/caching plumbing and the
//! four methods (BYOL, MoCo, SwAV, SparK).

pub mod byol;
pub mod moco;
pub mod spark;
pub mod swav;

use crate::data::DatasetView;
use crate::error::{Error, Result};
use crate::nn::layers::Fwd;
use crate::nn::{GradStore, Tape, Var};
use crate::state::ModelState;
use ndarray::{Array3, ArrayD};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Decoded images held in memory for a training run (u8 to keep the cache
/// small; converted per batch).
pub struct ImageCache {
    images: Vec<Array3<u8>>,
}

impl ImageCache {
    /// Decode every image of a view in parallel. Pretext callers must pass a
    /// label-hidden view.
    pub fn load(view: &DatasetView) -> Result<Self> {
        let images: Result<Vec<Array3<u8>>> = (0..view.len())
            .into_par_iter()
            .map(|pos| {
                let img = crate::data::load_image(&view.record(pos).path)?;
                Ok(img.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
            })
            .collect();
        Ok(Self { images: images? })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, pos: usize) -> Array3<f64> {
        self.images[pos].mapv(|v| v as f64 / 255.0)
    }
}

/// Deterministic epoch batching: a seeded shuffle sliced into full batches
/// (the trailing partial batch is dropped so queue arithmetic stays exact).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be positive"));
    }
    if n < batch_size {
        return Err(Error::validation(format!(
            "dataset of {n} images cannot fill a batch of {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut crate::rng::rng(seed, "epoch-order", &[epoch]));
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Run a closure under a forward context for one state, returning the result
/// together with the bindings (for gradient harvesting) and pending buffer
/// updates (for committing after the step).
pub fn with_state<R>(
    tape: &mut Tape,
    state: &ModelState,
    training: bool,
    stop_gradient: bool,
    body: impl FnOnce(&mut Fwd) -> R,
) -> (R, BTreeMap<String, Var>, Vec<(String, ArrayD<f64>)>) {
    let mut f = if stop_gradient {
        Fwd::frozen(tape, state, training)
    } else {
        Fwd::new(tape, state, training)
    };
    let out = body(&mut f);
    let bindings = f.bindings().clone();
    let updates = std::mem::take(&mut f.buffer_updates);
    (out, bindings, updates)
}

/// Pull named gradients for a set of bindings out of a grad store.
pub fn named_grads(
    bindings: &BTreeMap<String, Var>,
    grads: &mut GradStore,
) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    for (name, &var) in bindings {
        if let Some(g) = grads.take(var) {
            out.insert(name.clone(), g);
        }
    }
    out
}

/// Per-epoch mean losses recorded by a pretext run.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct LossCurve {
    pub epoch_means: Vec<f64>,
}

impl LossCurve {
    pub fn push(&mut self, mean: f64) {
        self.epoch_means.push(mean);
    }

    pub fn decreased(&self) -> bool {
        match (self.epoch_means.first(), self.epoch_means.last()) {
            (Some(first), Some(last)) if self.epoch_means.len() >= 2 => last < first,
            _ => false,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_means.iter().enumerate() {
            s.push_str(&format!("{e},{l}\n"));
        }
        s
    }
}

/// Interface the experiment runner drives. Each trainer owns its states,
/// optimizer, and loss history.
pub trait PretextTrainer {
    fn method_name(&self) -> &'static str;

    /// One pass over the cache; returns the epoch's mean loss.
    fn train_epoch(&mut self, cache: &ImageCache, epoch: u64) -> Result<f64>;

    /// Encoder weights to hand to fine-tuning (the online/query encoder).
    fn export_encoder(&self) -> ModelState;

    /// All states to persist in a checkpoint.
    fn checkpoint_sections(&self) -> BTreeMap<String, ModelState>;

    /// Restore from checkpoint sections.
    fn restore_sections(&mut self, sections: BTreeMap<String, ModelState>) -> Result<()>;

    fn curve(&self) -> &LossCurve;

    fn steps_done(&self) -> u64;
}

/// Pack optimizer moments into a state so checkpoints stay one format.
pub fn optim_to_state(o: &crate::nn::optim::OptimState) -> ModelState {
    let mut s = ModelState::new();
    for (k, v) in &o.m {
        s.insert_param(format!("m.{k}"), v.clone());
    }
    for (k, v) in &o.v {
        s.insert_param(format!("v.{k}"), v.clone());
    }
    s.insert_buffer("t", ndarray::arr1(&[o.t as f64]).into_dyn());
    s
}

pub fn optim_from_state(s: &ModelState) -> crate::nn::optim::OptimState {
    let mut o = crate::nn::optim::OptimState::default();
    for (name, value) in s.params() {
        if let Some(k) = name.strip_prefix("m.") {
            o.m.insert(k.to_string(), value.clone());
        } else if let Some(k) = name.strip_prefix("v.") {
            o.v.insert(k.to_string(), value.clone());
        }
    }
    o.t = s.buffer("t").map_or(0, |t| t[[0]] as u64);
    o
}

/// Step counter and loss curve, persisted alongside the model states.
pub fn trainer_meta_state(steps: u64, curve: &LossCurve) -> ModelState {
    let mut s = ModelState::new();
    s.insert_buffer("steps", ndarray::arr1(&[steps as f64]).into_dyn());
    s.insert_buffer(
        "epoch_means",
        ndarray::Array1::from_vec(curve.epoch_means.clone()).into_dyn(),
    );
    s
}

pub fn trainer_meta_from_state(s: &ModelState) -> (u64, LossCurve) {
    let steps = s.buffer("steps").map_or(0, |v| v[[0]] as u64);
    let epoch_means = s
        .buffer("epoch_means")
        .map(|v| v.iter().copied().collect())
        .unwrap_or_default();
    (steps, LossCurve { epoch_means })
}

/// Guard shared by all pretext entry points.
pub fn check_label_hidden(view: &DatasetView) -> Result<()> {
    if view.label_visible {
        return Err(Error::validation(
            "pretext training requires a label-hidden view",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_are_deterministic_and_full() {
        let b1 = epoch_batches(10, 3, 7, 0).unwrap();
        let b2 = epoch_batches(10, 3, 7, 0).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.len(), 3);
        assert!(b1.iter().all(|b| b.len() == 3));
        let b3 = epoch_batches(10, 3, 7, 1).unwrap();
        assert_ne!(b1, b3, "different epochs reshuffle");
        assert!(epoch_batches(2, 3, 7, 0).is_err());
    }

    #[test]
    fn loss_curve_decrease_detection() {
        let mut c = LossCurve::default();
        c.push(1.0);
        assert!(!c.decreased());
        c.push(0.5);
        assert!(c.decreased());
    }
}
