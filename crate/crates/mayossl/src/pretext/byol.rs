//! Bootstrap-style two-network pretraining: an online network with a
//! predictor chases the projections of a slow EMA target network across two
//! augmented views. No negatives are involved.

use super::{epoch_batches, named_grads, with_state, ImageCache, LossCurve, PretextTrainer};
use crate::augment::{self, AugmentConfig};
use crate::backbone::{pooled_embedding, Encoder, EncoderSpec, MlpHead};
use crate::error::{Error, Result};
use crate::nn::optim::{cosine_lr, AdamW, OptimState};
use crate::nn::{Tape, Var};
use crate::rng;
use crate::state::{ema_update, ModelState};
use ndarray::Ix2;
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ByolConfig {
    pub ema_momentum: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub symmetrize: bool,
    /// Copy the online weights into the target at step 0 (default) instead
    /// of random target initialization.
    pub target_copy_init: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ByolConfig {
    fn default() -> Self {
        Self {
            ema_momentum: 0.996,
            latent_dim: 256,
            hidden_dim: 256,
            symmetrize: true,
            target_copy_init: true,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 2,
            batch_size: 32,
        }
    }
}

impl ByolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::validation(format!(
                "ema_momentum {} outside [0,1)",
                self.ema_momentum
            )));
        }
        if self.latent_dim < 2 {
            return Err(Error::validation("latent_dim must be at least 2"));
        }
        Ok(())
    }
}

/// Normalized mean squared error between L2-normalized rows:
/// mean_b ||p_hat - z_hat||^2 = 2 - 2 cos; range [0,4].
pub fn byol_loss(tape: &mut Tape, prediction: Var, target: Var) -> Result<Var> {
    let p = tape.value(prediction);
    let z = tape.value(target);
    if p.shape() != z.shape() || p.ndim() != 2 || p.shape()[1] < 2 {
        return Err(Error::validation(format!(
            "byol_loss expects matching (B,d>=2) inputs, got {:?} vs {:?}",
            p.shape(),
            z.shape()
        )));
    }
    for v in [p, z] {
        let rows = v.view().into_dimensionality::<Ix2>().unwrap();
        for r in rows.rows() {
            let n = r.dot(&r);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::validation("byol_loss: zero-norm or non-finite row"));
            }
        }
    }
    let pn = tape.l2norm_rows(prediction);
    let zn = tape.l2norm_rows(target);
    let cos = tape.rowwise_dot(pn, zn);
    let mean = tape.mean_all(cos);
    let scaled = tape.scale(mean, -2.0);
    Ok(tape.add_scalar(scaled, 2.0))
}

pub struct ByolTrainer {
    pub cfg: ByolConfig,
    pub aug: AugmentConfig,
    encoder: Encoder,
    projection: MlpHead,
    predictor: MlpHead,
    online: ModelState,
    target: ModelState,
    predictor_state: ModelState,
    optim_online: OptimState,
    optim_pred: OptimState,
    seed: u64,
    steps: u64,
    total_steps: u64,
    curve: LossCurve,
}

impl ByolTrainer {
    pub fn new(
        spec: &EncoderSpec,
        cfg: ByolConfig,
        aug: AugmentConfig,
        seed: u64,
        total_steps: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(spec.clone())?;
        let projection = MlpHead::new("projection", spec.feature_dim(), cfg.hidden_dim, cfg.latent_dim);
        let predictor = MlpHead::new("predictor", cfg.latent_dim, cfg.hidden_dim, cfg.latent_dim);

        let mut online = encoder.init_state(rng::derive(seed, "byol-online", &[]));
        projection.init(&mut online, rng::derive(seed, "byol-proj", &[]));

        let target = if cfg.target_copy_init {
            online.clone()
        } else {
            let mut t = encoder.init_state(rng::derive(seed, "byol-target", &[]));
            projection.init(&mut t, rng::derive(seed, "byol-target-proj", &[]));
            t
        };

        let mut predictor_state = ModelState::new();
        predictor.init(&mut predictor_state, rng::derive(seed, "byol-pred", &[]));

        Ok(Self {
            cfg,
            aug,
            encoder,
            projection,
            predictor,
            online,
            target,
            predictor_state,
            optim_online: OptimState::default(),
            optim_pred: OptimState::default(),
            seed,
            steps: 0,
            total_steps,
            curve: LossCurve::default(),
        })
    }

    pub fn online(&self) -> &ModelState {
        &self.online
    }

    pub fn target(&self) -> &ModelState {
        &self.target
    }

    /// One gradient step on a batch of raw images.
    pub fn step(&mut self, images: &[ndarray::Array3<f64>]) -> Result<f64> {
        let step_seed = rng::derive(self.seed, "byol-step", &[self.steps]);
        let views: Result<Vec<_>> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| augment::two_views(img, &self.aug, rng::derive(step_seed, "view", &[i as u64])))
            .collect();
        let views = views?;
        let view_a = augment::to_chw_batch(&views.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>());
        let view_b = augment::to_chw_batch(&views.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let xa = tape.constant(view_a.into_dyn());
        let xb = tape.constant(view_b.into_dyn());

        // online branch (gradients flow)
        let ((za, zb), online_bind, online_updates) =
            with_state(&mut tape, &self.online, true, false, |f| {
                let pa = self.encoder.forward(f, xa, None).unwrap();
                let ea = pooled_embedding(f, &pa);
                let za = self.projection.forward(f, ea);
                let pb = self.encoder.forward(f, xb, None).unwrap();
                let eb = pooled_embedding(f, &pb);
                let zb = self.projection.forward(f, eb);
                (za, zb)
            });

        // predictor on the online projections
        let ((qa, qb), pred_bind, pred_updates) =
            with_state(&mut tape, &self.predictor_state, true, false, |f| {
                (self.predictor.forward(f, za), self.predictor.forward(f, zb))
            });

        // target branch: parameters bound as constants, gradients cannot flow
        let ((ta, tb), _, _) = with_state(&mut tape, &self.target, true, true, |f| {
            let pa = self.encoder.forward(f, xa, None).unwrap();
            let ea = pooled_embedding(f, &pa);
            let ta = self.projection.forward(f, ea);
            let pb = self.encoder.forward(f, xb, None).unwrap();
            let eb = pooled_embedding(f, &pb);
            let tb = self.projection.forward(f, eb);
            (ta, tb)
        });

        let loss = if self.cfg.symmetrize {
            let l1 = byol_loss(&mut tape, qa, tb)?;
            let l2 = byol_loss(&mut tape, qb, ta)?;
            let s = tape.add(l1, l2);
            tape.scale(s, 0.5)
        } else {
            // asymmetric assignment: first view to the target, second online
            byol_loss(&mut tape, qb, ta)?
        };
        let loss_val = tape.scalar(loss);

        let mut grads = tape.backward(loss);
        let online_grads = named_grads(&online_bind, &mut grads);
        let pred_grads = named_grads(&pred_bind, &mut grads);
        drop(tape);

        let lr = cosine_lr(self.cfg.lr, self.steps, self.total_steps.max(1), 0.01);
        let adam = AdamW {
            lr,
            ..AdamW::new(self.cfg.lr, self.cfg.weight_decay)
        };
        adam.step(&mut self.optim_online, &mut self.online, &online_grads, 1.0);
        adam.step(&mut self.optim_pred, &mut self.predictor_state, &pred_grads, 1.0);

        crate::nn::layers::Fwd::commit_buffers(online_updates, &mut self.online);
        crate::nn::layers::Fwd::commit_buffers(pred_updates, &mut self.predictor_state);

        ema_update(&mut self.target, &self.online, self.cfg.ema_momentum)?;
        self.steps += 1;
        Ok(loss_val)
    }
}

impl PretextTrainer for ByolTrainer {
    fn method_name(&self) -> &'static str {
        "byol"
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
        self.online.clone()
    }

    fn checkpoint_sections(&self) -> BTreeMap<String, ModelState> {
        let mut s = BTreeMap::new();
        s.insert("online".into(), self.online.clone());
        s.insert("target".into(), self.target.clone());
        s.insert("predictor".into(), self.predictor_state.clone());
        s.insert("optim.online".into(), super::optim_to_state(&self.optim_online));
        s.insert("optim.predictor".into(), super::optim_to_state(&self.optim_pred));
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
        let online = take(&mut sections, "online")?;
        self.online.check_same_params(&online)?;
        self.online = online;
        self.target = take(&mut sections, "target")?;
        self.predictor_state = take(&mut sections, "predictor")?;
        self.optim_online = super::optim_from_state(&take(&mut sections, "optim.online")?);
        self.optim_pred = super::optim_from_state(&take(&mut sections, "optim.predictor")?);
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
