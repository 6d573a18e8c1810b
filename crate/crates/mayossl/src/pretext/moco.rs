//! Momentum-contrast pretraining: a query encoder trained against an EMA key
//! encoder and a FIFO queue of past keys serving as negatives.

use super::{epoch_batches, named_grads, with_state, ImageCache, LossCurve, PretextTrainer};
use crate::augment::{self, AugmentConfig};
use crate::backbone::{pooled_embedding, Encoder, EncoderSpec, MlpHead};
use crate::error::{Error, Result};
use crate::nn::optim::{cosine_lr, AdamW, OptimState};
use crate::nn::{Tape, Var};
use crate::rng;
use crate::state::{ema_update, ModelState};
use ndarray::{Array2, Ix2};
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MocoConfig {
    /// Softmax temperature.
    pub temperature: f64,
    /// Key-encoder momentum.
    pub momentum: f64,
    /// Queue capacity; must be a multiple of batch_size.
    pub queue_capacity: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            momentum: 0.999,
            queue_capacity: 4096,
            latent_dim: 256,
            hidden_dim: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 2,
            batch_size: 32,
        }
    }
}

impl MocoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::validation(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!(
                "momentum {} outside [0,1)",
                self.momentum
            )));
        }
        if self.queue_capacity == 0 || self.queue_capacity % self.batch_size != 0 {
            return Err(Error::validation(format!(
                "queue capacity {} must be a positive multiple of batch size {}",
                self.queue_capacity, self.batch_size
            )));
        }
        Ok(())
    }
}

const UNIT_NORM_TOL: f64 = 1e-5;

/// FIFO dictionary of L2-normalized key embeddings.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    storage: Array2<f64>,
    capacity: usize,
    write_cursor: usize,
    filled: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            storage: Array2::zeros((capacity, dim)),
            capacity,
            write_cursor: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn dim(&self) -> usize {
        self.storage.ncols()
    }

    /// The stored keys that are valid as negatives, in storage order.
    pub fn negatives(&self) -> Array2<f64> {
        self.storage
            .slice(ndarray::s![..self.filled, ..])
            .to_owned()
    }

    /// Append a batch of unit-norm keys; the oldest batch is overwritten
    /// once the queue is full. Batch size must divide the capacity.
    pub fn enqueue(&mut self, keys: &Array2<f64>) -> Result<()> {
        let b = keys.nrows();
        if b == 0 || self.capacity % b != 0 {
            return Err(Error::validation(format!(
                "batch of {b} keys does not divide queue capacity {}",
                self.capacity
            )));
        }
        if keys.ncols() != self.dim() {
            return Err(Error::validation("key dimension mismatch"));
        }
        for row in keys.rows() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::validation(format!(
                    "non-normalized key (norm {n}) enqueued"
                )));
            }
        }
        for (i, row) in keys.rows().into_iter().enumerate() {
            let slot = (self.write_cursor + i) % self.capacity;
            self.storage.row_mut(slot).assign(&row);
        }
        self.write_cursor = (self.write_cursor + b) % self.capacity;
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }
}

/// Single-positive InfoNCE with the queue contents as negatives, computed
/// with max-subtraction. An empty queue gives exactly zero.
pub fn info_nce(
    tape: &mut Tape,
    query: Var,
    key_pos: Var,
    queue: &FeatureQueue,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::validation(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let q = tape.value(query);
    let k = tape.value(key_pos);
    if q.shape() != k.shape() || q.ndim() != 2 {
        return Err(Error::validation(format!(
            "info_nce expects matching (B,d) inputs, got {:?} vs {:?}",
            q.shape(),
            k.shape()
        )));
    }
    for v in [q, k] {
        let rows = v.view().into_dimensionality::<Ix2>().unwrap();
        for r in rows.rows() {
            let n = r.dot(&r).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::validation(format!(
                    "info_nce requires unit-norm rows (got norm {n})"
                )));
            }
        }
    }
    let b = q.shape()[0];
    let s_pos = tape.rowwise_dot(query, key_pos);
    let s_pos = tape.reshape(s_pos, &[b, 1]);
    let logits = if queue.filled() > 0 {
        let negs = tape.constant(queue.negatives().into_dyn());
        let s_neg = tape.matmul_nt(query, negs);
        tape.concat_cols(s_pos, s_neg)
    } else {
        s_pos
    };
    let scaled = tape.scale(logits, 1.0 / temperature);
    let logp = tape.log_softmax_rows(scaled);
    let pos_lp = tape.col(logp, 0);
    let mean = tape.mean_all(pos_lp);
    Ok(tape.scale(mean, -1.0))
}

pub struct MocoTrainer {
    pub cfg: MocoConfig,
    pub aug: AugmentConfig,
    encoder: Encoder,
    projection: MlpHead,
    query_state: ModelState,
    key_state: ModelState,
    pub queue: FeatureQueue,
    optim: OptimState,
    seed: u64,
    steps: u64,
    total_steps: u64,
    curve: LossCurve,
}

impl MocoTrainer {
    pub fn new(
        spec: &EncoderSpec,
        cfg: MocoConfig,
        aug: AugmentConfig,
        seed: u64,
        total_steps: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(spec.clone())?;
        let projection = MlpHead::new("projection", spec.feature_dim(), cfg.hidden_dim, cfg.latent_dim);
        let mut query_state = encoder.init_state(rng::derive(seed, "moco-query", &[]));
        projection.init(&mut query_state, rng::derive(seed, "moco-proj", &[]));
        let key_state = query_state.clone();
        let queue = FeatureQueue::new(cfg.queue_capacity, cfg.latent_dim);
        Ok(Self {
            cfg,
            aug,
            encoder,
            projection,
            query_state,
            key_state,
            queue,
            optim: OptimState::default(),
            seed,
            steps: 0,
            total_steps,
            curve: LossCurve::default(),
        })
    }

    pub fn query_state(&self) -> &ModelState {
        &self.query_state
    }

    pub fn key_state(&self) -> &ModelState {
        &self.key_state
    }

    pub fn step(&mut self, images: &[ndarray::Array3<f64>]) -> Result<f64> {
        let step_seed = rng::derive(self.seed, "moco-step", &[self.steps]);
        let views: Result<Vec<_>> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| augment::two_views(img, &self.aug, rng::derive(step_seed, "view", &[i as u64])))
            .collect();
        let views = views?;
        let view_q = augment::to_chw_batch(&views.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>());
        let view_k = augment::to_chw_batch(&views.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let xq = tape.constant(view_q.into_dyn());
        let xk = tape.constant(view_k.into_dyn());

        let (q_emb, q_bind, q_updates) = with_state(&mut tape, &self.query_state, true, false, |f| {
            let p = self.encoder.forward(f, xq, None).unwrap();
            let e = pooled_embedding(f, &p);
            self.projection.forward(f, e)
        });
        let q_norm = tape.l2norm_rows(q_emb);

        // key branch: no gradient, updated only by EMA
        let (k_emb, _, _) = with_state(&mut tape, &self.key_state, true, true, |f| {
            let p = self.encoder.forward(f, xk, None).unwrap();
            let e = pooled_embedding(f, &p);
            self.projection.forward(f, e)
        });
        let k_norm = tape.l2norm_rows(k_emb);

        let loss = info_nce(&mut tape, q_norm, k_norm, &self.queue, self.cfg.temperature)?;
        let loss_val = tape.scalar(loss);

        let mut grads = tape.backward(loss);
        let q_grads = named_grads(&q_bind, &mut grads);
        let new_keys = tape
            .value(k_norm)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        drop(tape);

        let lr = cosine_lr(self.cfg.lr, self.steps, self.total_steps.max(1), 0.01);
        let adam = AdamW {
            lr,
            ..AdamW::new(self.cfg.lr, self.cfg.weight_decay)
        };
        adam.step(&mut self.optim, &mut self.query_state, &q_grads, 1.0);
        crate::nn::layers::Fwd::commit_buffers(q_updates, &mut self.query_state);

        ema_update(&mut self.key_state, &self.query_state, self.cfg.momentum)?;
        self.queue.enqueue(&new_keys)?;
        self.steps += 1;
        Ok(loss_val)
    }
}

impl PretextTrainer for MocoTrainer {
    fn method_name(&self) -> &'static str {
        "moco"
    }

    fn train_epoch(&mut self, cache: &ImageCache, epoch: u64) -> Result<f64> {
        let batches = epoch_batches(cache.len(), self.cfg.batch_size, self.seed, epoch)?;
        let mut sum = 0.0;
        for batch in &batches {
            let images: Vec<_> = batch.iter().map(|&i| cache.get(i)).collect();
            sum += self.step(&images)?;
        }
        let mean = sum / batches.len() as f64;
        self.curve.push(mean);
        Ok(mean)
    }

    fn export_encoder(&self) -> ModelState {
        self.query_state.clone()
    }

    fn checkpoint_sections(&self) -> BTreeMap<String, ModelState> {
        let mut s = BTreeMap::new();
        s.insert("query".into(), self.query_state.clone());
        s.insert("key".into(), self.key_state.clone());
        s.insert("optim.query".into(), super::optim_to_state(&self.optim));
        let mut queue_state = ModelState::new();
        queue_state.insert_buffer("storage", self.queue.storage.clone().into_dyn());
        queue_state.insert_buffer(
            "cursor_filled",
            ndarray::arr1(&[self.queue.write_cursor as f64, self.queue.filled as f64]).into_dyn(),
        );
        s.insert("queue".into(), queue_state);
        s.insert(
            "trainer".into(),
            super::trainer_meta_state(self.steps, &self.curve),
        );
        s
    }

    fn restore_sections(&mut self, mut sections: BTreeMap<String, ModelState>) -> Result<()> {
        let take = |s: &mut BTreeMap<String, ModelState>, k: &str| -> Result<ModelState> {
            s.remove(k)
                .ok_or_else(|| Error::validation(format!("checkpoint missing section {k}")))
        };
        let query = take(&mut sections, "query")?;
        self.query_state.check_same_params(&query)?;
        self.query_state = query;
        self.key_state = take(&mut sections, "key")?;
        self.optim = super::optim_from_state(&take(&mut sections, "optim.query")?);
        let queue_state = take(&mut sections, "queue")?;
        let storage = queue_state
            .buffer("storage")
            .ok_or_else(|| Error::validation("queue storage missing"))?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::validation("queue storage must be 2-d"))?
            .to_owned();
        let cf = queue_state
            .buffer("cursor_filled")
            .ok_or_else(|| Error::validation("queue cursor missing"))?;
        self.queue = FeatureQueue {
            capacity: storage.nrows(),
            storage,
            write_cursor: cf[[0]] as usize,
            filled: cf[[1]] as usize,
        };
        let (steps, curve) = super::trainer_meta_from_state(&take(&mut sections, "trainer")?);
        self.steps = steps;
        self.curve = curve;
        Ok(())
    }

    fn curve(&self) -> &LossCurve {
        &self.curve
    }

    fn steps_done(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn unit(rows: &[[f64; 3]]) -> Array2<f64> {
        let mut a = Array2::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            for j in 0..3 {
                a[[i, j]] = r[j] / n;
            }
        }
        a
    }

    #[test]
    fn fifo_eviction_order() {
        // capacity 4: enqueue [a,b], [c,d], [e,f] -> storage {e,f,c,d}
        let mut q = FeatureQueue::new(4, 3);
        let ab = unit(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let cd = unit(&[[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
        let ef = unit(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]);
        q.enqueue(&ab).unwrap();
        q.enqueue(&cd).unwrap();
        assert_eq!(q.filled(), 4);
        q.enqueue(&ef).unwrap();
        assert_eq!(q.filled(), 4);
        let s = q.negatives();
        assert_eq!(s.row(0), ef.row(0));
        assert_eq!(s.row(1), ef.row(1));
        assert_eq!(s.row(2), cd.row(0));
        assert_eq!(s.row(3), cd.row(1));
    }

    #[test]
    fn fill_to_capacity_in_one_batch() {
        let mut q = FeatureQueue::new(2, 3);
        let keys = unit(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        q.enqueue(&keys).unwrap();
        assert_eq!(q.filled(), 2);
    }

    #[test]
    fn enqueue_rejects_bad_batches() {
        let mut q = FeatureQueue::new(4, 3);
        let three = unit(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(q.enqueue(&three).is_err(), "3 does not divide 4");
        let unnormalized = arr2(&[[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(q.enqueue(&unnormalized).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        // empty queue: only the positive -> -log 1 = 0
        let mut t = Tape::new();
        let q = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let k = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let empty = FeatureQueue::new(4, 3);
        let l = info_nce(&mut t, q, k, &empty, 0.07).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);

        // one negative with q.k+ = q.k-: -log(e^s / 2 e^s) = ln 2
        let mut queue = FeatureQueue::new(1, 3);
        queue
            .enqueue(&unit(&[[1.0, 0.0, 0.0]]))
            .unwrap();
        let mut t = Tape::new();
        let q = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let k = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let l = info_nce(&mut t, q, k, &queue, 0.5).unwrap();
        assert!((t.scalar(l) - 2.0f64.ln()).abs() < 1e-12);

        // strong positive vs 8 orthogonal negatives at tau = 0.07
        let mut queue = FeatureQueue::new(8, 3);
        for _ in 0..4 {
            queue
                .enqueue(&unit(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
                .unwrap();
        }
        let mut t = Tape::new();
        let q = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let k = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let l = info_nce(&mut t, q, k, &queue, 0.07).unwrap();
        assert!(t.scalar(l) < 1e-5, "loss {} should be negligible", t.scalar(l));
    }

    #[test]
    fn adding_negatives_never_decreases_loss() {
        let mut r = crate::rng::rng(5, "moco-test", &[]);
        use rand::Rng;
        for _ in 0..20 {
            let mk = || {
                let v: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                [v[0] / n, v[1] / n, v[2] / n]
            };
            let qrow = mk();
            let krow = mk();
            let n1 = mk();
            let n2 = mk();
            let eval = |negs: &[[f64; 3]]| {
                let mut queue = FeatureQueue::new(negs.len().max(1), 3);
                for n in negs {
                    queue.enqueue(&unit(&[*n])).unwrap();
                }
                let mut t = Tape::new();
                let q = t.constant(unit(&[qrow]).into_dyn());
                let k = t.constant(unit(&[krow]).into_dyn());
                let l = info_nce(&mut t, q, k, &queue, 0.2).unwrap();
                t.scalar(l)
            };
            let with_one = eval(&[n1]);
            let with_two = eval(&[n1, n2]);
            assert!(with_two >= with_one - 1e-12);
        }
    }

    #[test]
    fn temperature_sharpens_when_positive_dominates() {
        let mut queue = FeatureQueue::new(2, 3);
        queue
            .enqueue(&unit(&[[0.0, 1.0, 0.0], [0.0, 0.6, 0.8]]))
            .unwrap();
        let eval = |tau: f64| {
            let mut t = Tape::new();
            let q = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
            let k = t.constant(unit(&[[0.9, 0.1, 0.0]]).into_dyn());
            let l = info_nce(&mut t, q, k, &queue, tau).unwrap();
            t.scalar(l)
        };
        let sharp = eval(1e-3);
        let smooth = eval(1.0);
        assert!(sharp < 1e-9, "tau->0 with dominant positive: {sharp}");
        assert!(smooth > sharp);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        use crate::nn::gradcheck::max_rel_err;
        use rand::Rng;
        for inst in 0..10 {
            let mut r = crate::rng::rng(inst, "moco-fd", &[]);
            let mut queue = FeatureQueue::new(4, 6);
            for _ in 0..4 {
                let v: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                let row = Array2::from_shape_vec((1, 6), v.iter().map(|x| x / n).collect()).unwrap();
                queue.enqueue(&row).unwrap();
            }
            let key: Vec<f64> = (0..6 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let key = Array2::from_shape_vec((3, 6), key).unwrap();
            let raw: Vec<f64> = (0..6 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let raw = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[3, 6]), raw).unwrap();
            // check through the normalization so inputs need not be unit norm
            let err = max_rel_err(&raw, &|t, v| {
                let qn = t.l2norm_rows(v);
                let mut kn = key.clone();
                for mut row in kn.rows_mut() {
                    let n = row.dot(&row).sqrt();
                    row.mapv_inplace(|x| x / n);
                }
                let k = t.constant(kn.into_dyn());
                info_nce(t, qn, k, &queue, 0.2).unwrap()
            });
            assert!(err < 1e-4, "info_nce grad err {err} at instance {inst}");
        }
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let mut t = Tape::new();
        let q = t.constant(unit(&[[1.0, 0.0, 0.0]]).into_dyn());
        let queue = FeatureQueue::new(2, 3);
        assert!(info_nce(&mut t, q, q, &queue, 0.0).is_err());
        assert!(info_nce(&mut t, q, q, &queue, -1.0).is_err());
    }
}
