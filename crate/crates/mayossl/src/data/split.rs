//! Stratified splitting, fraction subsampling, and class weights.
//!
//! Rounding rule: each split except the last receives round-half-up of its
//! fraction of the per-class count; the last split takes the remainder.

use super::{DatasetView, Manifest, N_CLASSES};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Assignment of every manifest record to exactly one named split.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub split_names: Vec<String>,
    /// record index -> split index
    pub assignment: Vec<usize>,
    pub fractions: Vec<f64>,
    pub seed: u64,
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::validation("no split fractions given"));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::validation("split fractions must be non-negative"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Per-class split counts under the rounding rule.
pub fn split_counts(class_count: u64, fractions: &[f64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(fractions.len());
    let mut remaining = class_count;
    for (k, &f) in fractions.iter().enumerate() {
        if k + 1 == fractions.len() {
            out.push(remaining);
        } else {
            let take = round_half_up(f * class_count as f64).min(remaining);
            out.push(take);
            remaining -= take;
        }
    }
    out
}

/// Deterministic stratified split: per class, a seeded shuffle followed by
/// contiguous slicing at the rounded boundaries.
pub fn stratified_split(
    manifest: &Manifest,
    fractions: &[f64],
    names: &[String],
    seed: u64,
) -> Result<SplitPlan> {
    check_fractions(fractions)?;
    if names.len() != fractions.len() {
        return Err(Error::validation(format!(
            "{} split names for {} fractions",
            names.len(),
            fractions.len()
        )));
    }
    let mut assignment = vec![usize::MAX; manifest.len()];
    for (class, indices) in manifest.indices_by_class().iter().enumerate() {
        let mut shuffled = indices.clone();
        let mut r = rng::rng(seed, "stratified-split", &[class as u64]);
        shuffled.shuffle(&mut r);
        let counts = split_counts(indices.len() as u64, fractions);
        let mut cursor = 0usize;
        for (split_idx, &take) in counts.iter().enumerate() {
            for &rec in &shuffled[cursor..cursor + take as usize] {
                assignment[rec] = split_idx;
            }
            cursor += take as usize;
        }
    }
    debug_assert!(assignment.iter().all(|&s| s != usize::MAX));
    Ok(SplitPlan {
        split_names: names.to_vec(),
        assignment,
        fractions: fractions.to_vec(),
        seed,
    })
}

/// Split that keeps all images of one patient in the same split; per-class
/// exactness is approximate because whole patient groups move together.
/// Records without a patient id form singleton groups.
pub fn patient_grouped_split(
    manifest: &Manifest,
    fractions: &[f64],
    names: &[String],
    seed: u64,
) -> Result<SplitPlan> {
    check_fractions(fractions)?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let key = r
            .patient_id
            .clone()
            .unwrap_or_else(|| format!("__solo_{i}"));
        groups.entry(key).or_default().push(i);
    }
    let mut group_list: Vec<Vec<usize>> = groups.into_values().collect();
    let mut r = rng::rng(seed, "patient-split", &[]);
    group_list.shuffle(&mut r);

    let total = manifest.len() as f64;
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total).collect();
    let mut filled = vec![0f64; fractions.len()];
    let mut assignment = vec![0usize; manifest.len()];
    for group in group_list {
        // most under-filled split relative to its quota gets the group
        let split_idx = (0..fractions.len())
            .min_by(|&a, &b| {
                let da = filled[a] - quotas[a];
                let db = filled[b] - quotas[b];
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        for &rec in &group {
            assignment[rec] = split_idx;
        }
        filled[split_idx] += group.len() as f64;
    }
    Ok(SplitPlan {
        split_names: names.to_vec(),
        assignment,
        fractions: fractions.to_vec(),
        seed,
    })
}

impl SplitPlan {
    /// Per-split, per-class record counts.
    pub fn counts(&self, manifest: &Manifest) -> Vec<[u64; N_CLASSES]> {
        let mut out = vec![[0u64; N_CLASSES]; self.split_names.len()];
        for (rec, &split) in self.assignment.iter().enumerate() {
            out[split][manifest.records[rec].mes_class as usize] += 1;
        }
        out
    }

    /// Materialize the views; pretext splits are produced label-hidden by
    /// the callers that need them.
    pub fn view(
        &self,
        manifest: &Arc<Manifest>,
        split_name: &str,
        label_visible: bool,
    ) -> Result<DatasetView> {
        let split_idx = self
            .split_names
            .iter()
            .position(|n| n == split_name)
            .ok_or_else(|| Error::validation(format!("no split named {split_name}")))?;
        let indices: Vec<usize> = self
            .assignment
            .iter()
            .enumerate()
            .filter_map(|(rec, &s)| (s == split_idx).then_some(rec))
            .collect();
        DatasetView::new(Arc::clone(manifest), indices, label_visible)
    }

    /// CSV of (path, split) for auditability.
    pub fn to_csv(&self, manifest: &Manifest) -> String {
        let mut s = String::from("path,split\n");
        for (rec, &split) in self.assignment.iter().enumerate() {
            s.push_str(&format!(
                "{},{}\n",
                manifest.records[rec].path.display(),
                self.split_names[split]
            ));
        }
        s
    }
}

/// Per-class keep of round-half-up(fraction * n_c) records, chosen by a
/// seeded shuffle; kept indices preserve their original relative order and
/// nest across fractions under the same seed.
pub fn subsample(view: &DatasetView, fraction: f64, seed: u64) -> Result<DatasetView> {
    if view.is_empty() {
        return Err(Error::validation("cannot subsample an empty view"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!(
            "subsample fraction {fraction} outside (0,1]"
        )));
    }
    let mut by_class: [Vec<usize>; N_CLASSES] = Default::default();
    for (pos, &rec) in view.indices.iter().enumerate() {
        by_class[view.manifest.records[rec].mes_class as usize].push(pos);
    }
    let mut kept_positions = Vec::new();
    for (class, positions) in by_class.iter().enumerate() {
        let mut shuffled = positions.clone();
        let mut r = rng::rng(seed, "subsample", &[class as u64]);
        shuffled.shuffle(&mut r);
        let take = round_half_up(fraction * positions.len() as f64) as usize;
        kept_positions.extend_from_slice(&shuffled[..take.min(shuffled.len())]);
    }
    kept_positions.sort_unstable();
    let indices: Vec<usize> = kept_positions.iter().map(|&p| view.indices[p]).collect();
    DatasetView::new(
        Arc::clone(&view.manifest),
        indices,
        view.label_visible,
    )
}

/// Inverse-frequency class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub n_images: u64,
    pub n_classes: usize,
}

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; n_classes],
            n_images: 0,
            n_classes,
        }
    }
}

/// weights[i] = n_images / (n_i * n_classes); every count must be positive.
pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::validation("class_weights needs at least one class"));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::validation(
            "class weight undefined for a class with zero samples",
        ));
    }
    let n_images: u64 = counts.iter().sum();
    let n_classes = counts.len();
    let weights = counts
        .iter()
        .map(|&c| n_images as f64 / (c as f64 * n_classes as f64))
        .collect();
    Ok(ClassWeights {
        weights,
        n_images,
        n_classes,
    })
}
