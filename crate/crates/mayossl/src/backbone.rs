//! Convolutional encoders emitting a 4-level feature pyramid (strides 4, 8,
//! 16, 32), projection/prediction/classifier heads, and the sparse execution
//! rule used by masked pretraining.
//!
//! Sparse mode emulates submanifold convolution on dense kernels: masked
//! patches are zeroed at the input, every normalization computes statistics
//! over valid positions only, and activations are re-gated to zero at each
//! resolution. Features at valid positions are therefore independent of the
//! pixel values hidden inside masked patches.

use crate::augment::MaskPlan;
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm1d, BatchNorm2d, Conv2d, Fwd, Linear};
use crate::nn::{Tape, Var};
use crate::rng;
use crate::state::ModelState;
use ndarray::{Array4, ArrayD};
use rand_chacha::ChaCha8Rng;

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    /// Small 4-stage residual net with basic blocks; the desk-scale default.
    ResidualSmall,
    /// Bottleneck residual net with depths (3,4,6,3).
    Residual50,
    /// Plain conv stack intended to carry externally converted weights.
    ExternalImport,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    pub stage_channels: [usize; 4],
    pub input_side: usize,
}

impl EncoderSpec {
    pub fn residual_small(input_side: usize) -> Self {
        Self {
            family: EncoderFamily::ResidualSmall,
            stage_channels: [16, 32, 64, 128],
            input_side,
        }
    }

    pub fn residual_50(input_side: usize) -> Self {
        Self {
            family: EncoderFamily::Residual50,
            stage_channels: [256, 512, 1024, 2048],
            input_side,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side % 32 != 0 || self.input_side == 0 {
            return Err(Error::validation(format!(
                "input_side {} must be a positive multiple of 32",
                self.input_side
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("stage channels must be positive"));
        }
        Ok(())
    }
}

/// Per-sample patch masks for a batch, with cached per-stride validity maps.
#[derive(Debug, Clone)]
pub struct BatchMask {
    pub plans: Vec<MaskPlan>,
}

impl BatchMask {
    pub fn new(plans: Vec<MaskPlan>) -> Result<Self> {
        if plans.is_empty() {
            return Err(Error::validation("batch mask needs at least one plan"));
        }
        let p = plans[0].patch_size;
        if plans.iter().any(|m| m.patch_size != p) {
            return Err(Error::validation("mixed patch sizes in one batch"));
        }
        if p % PYRAMID_STRIDES[3] != 0 {
            return Err(Error::validation(format!(
                "patch size {p} must be a multiple of the deepest stride {}",
                PYRAMID_STRIDES[3]
            )));
        }
        Ok(Self { plans })
    }

    /// (B,1,h,w) validity map at `stride` (1 = visible).
    pub fn valid4(&self, stride: usize) -> Result<Array4<f64>> {
        let first = self.plans[0].valid_at_stride(stride)?;
        let (h, w) = first.dim();
        let mut out = Array4::<f64>::zeros((self.plans.len(), 1, h, w));
        for (b, plan) in self.plans.iter().enumerate() {
            let v = plan.valid_at_stride(stride)?;
            for hi in 0..h {
                for wi in 0..w {
                    out[[b, 0, hi, wi]] = v[[hi, wi]];
                }
            }
        }
        Ok(out)
    }

    /// Broadcast a (B,1,h,w) validity map across C channels.
    fn gate_array(valid: &Array4<f64>, c: usize) -> ArrayD<f64> {
        let (b, _, h, w) = valid.dim();
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[bi, ci, hi, wi]] = valid[[bi, 0, hi, wi]];
                    }
                }
            }
        }
        out.into_dyn()
    }
}

/// Tape handles for the four pyramid levels (finest first: strides 4,8,16,32)
/// plus the validity maps when running sparse.
pub struct PyramidVars {
    pub levels: [Var; 4],
    pub valid: Option<[Array4<f64>; 4]>,
}

/// Materialized pyramid values, finest level first.
pub struct FeaturePyramid {
    pub levels: [ArrayD<f64>; 4],
    pub valid: Option<[Array4<f64>; 4]>,
}

#[derive(Debug, Clone)]
struct Block {
    kind: BlockKind,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BlockKind {
    Basic,
    Bottleneck,
    Plain,
}

impl Block {
    fn basic(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let convs = vec![
            Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3, stride),
            Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3, 1),
        ];
        let bns = vec![
            BatchNorm2d::new(format!("{name}.bn1"), out_ch),
            BatchNorm2d::new(format!("{name}.bn2"), out_ch),
        ];
        let proj = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(format!("{name}.proj"), in_ch, out_ch, 1, stride),
                BatchNorm2d::new(format!("{name}.proj_bn"), out_ch),
            )
        });
        Block {
            kind: BlockKind::Basic,
            convs,
            bns,
            proj,
        }
    }

    fn bottleneck(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let mid = (out_ch / 4).max(1);
        let convs = vec![
            Conv2d::new(format!("{name}.conv1"), in_ch, mid, 1, 1),
            Conv2d::new(format!("{name}.conv2"), mid, mid, 3, stride),
            Conv2d::new(format!("{name}.conv3"), mid, out_ch, 1, 1),
        ];
        let bns = vec![
            BatchNorm2d::new(format!("{name}.bn1"), mid),
            BatchNorm2d::new(format!("{name}.bn2"), mid),
            BatchNorm2d::new(format!("{name}.bn3"), out_ch),
        ];
        let proj = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(format!("{name}.proj"), in_ch, out_ch, 1, stride),
                BatchNorm2d::new(format!("{name}.proj_bn"), out_ch),
            )
        });
        Block {
            kind: BlockKind::Bottleneck,
            convs,
            bns,
            proj,
        }
    }

    fn plain(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let convs = vec![
            Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3, stride),
            Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3, 1),
        ];
        let bns = vec![
            BatchNorm2d::new(format!("{name}.bn1"), out_ch),
            BatchNorm2d::new(format!("{name}.bn2"), out_ch),
        ];
        Block {
            kind: BlockKind::Plain,
            convs,
            bns,
            proj: None,
        }
    }

    fn init(&self, state: &mut ModelState, r: &mut ChaCha8Rng) {
        for c in &self.convs {
            c.init(state, r);
        }
        for b in &self.bns {
            b.init(state);
        }
        if let Some((c, b)) = &self.proj {
            c.init(state, r);
            b.init(state);
        }
    }

    /// `mask_in`/`mask_out` are validity maps at the input/output strides.
    fn forward(
        &self,
        f: &mut Fwd,
        x: Var,
        mask_in: Option<&Array4<f64>>,
        mask_out: Option<&Array4<f64>>,
    ) -> Var {
        let gate = |f: &mut Fwd, v: Var, m: Option<&Array4<f64>>| -> Var {
            match m {
                Some(valid) => {
                    let c = f.tape.value(v).shape()[1];
                    let g = BatchMask::gate_array(valid, c);
                    f.tape.mul_const(v, &g)
                }
                None => v,
            }
        };
        match self.kind {
            BlockKind::Basic | BlockKind::Plain => {
                let mut y = self.convs[0].forward(f, x);
                y = self.bns[0].forward(f, y, mask_out);
                y = f.tape.relu(y);
                y = gate(f, y, mask_out);
                y = self.convs[1].forward(f, y);
                y = self.bns[1].forward(f, y, mask_out);
                let out = if self.kind == BlockKind::Plain {
                    y
                } else {
                    let skip = match &self.proj {
                        Some((c, bn)) => {
                            let s = c.forward(f, x);
                            bn.forward(f, s, mask_out)
                        }
                        None => x,
                    };
                    f.tape.add(y, skip)
                };
                let out = f.tape.relu(out);
                gate(f, out, mask_out)
            }
            BlockKind::Bottleneck => {
                let mut y = self.convs[0].forward(f, x);
                y = self.bns[0].forward(f, y, mask_in);
                y = f.tape.relu(y);
                y = gate(f, y, mask_in);
                y = self.convs[1].forward(f, y);
                y = self.bns[1].forward(f, y, mask_out);
                y = f.tape.relu(y);
                y = gate(f, y, mask_out);
                y = self.convs[2].forward(f, y);
                y = self.bns[2].forward(f, y, mask_out);
                let skip = match &self.proj {
                    Some((c, bn)) => {
                        let s = c.forward(f, x);
                        bn.forward(f, s, mask_out)
                    }
                    None => x,
                };
                let out = f.tape.add(y, skip);
                let out = f.tape.relu(out);
                gate(f, out, mask_out)
            }
        }
    }
}

/// Four-stage pyramid encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    stem: (Conv2d, BatchNorm2d),
    stages: [Vec<Block>; 4],
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let ch = spec.stage_channels;
        let depths: [usize; 4] = match spec.family {
            EncoderFamily::ResidualSmall => [1, 1, 1, 1],
            EncoderFamily::Residual50 => [3, 4, 6, 3],
            EncoderFamily::ExternalImport => [1, 1, 1, 1],
        };
        let stem = (
            Conv2d::new("encoder.stem.conv", 3, ch[0], 3, 2),
            BatchNorm2d::new("encoder.stem.bn", ch[0]),
        );
        let mut stages: [Vec<Block>; 4] = Default::default();
        let mut in_ch = ch[0];
        for (si, stage) in stages.iter_mut().enumerate() {
            for bi in 0..depths[si] {
                let name = format!("encoder.stage{si}.block{bi}");
                let stride = if bi == 0 { 2 } else { 1 };
                let block = match spec.family {
                    EncoderFamily::ResidualSmall => Block::basic(&name, in_ch, ch[si], stride),
                    EncoderFamily::Residual50 => Block::bottleneck(&name, in_ch, ch[si], stride),
                    EncoderFamily::ExternalImport => Block::plain(&name, in_ch, ch[si], stride),
                };
                stage.push(block);
                in_ch = ch[si];
            }
        }
        Ok(Self { spec, stem, stages })
    }

    /// Fresh parameter state for this encoder.
    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut state = ModelState::new();
        let mut r = rng::rng(seed, "encoder-init", &[]);
        self.stem.0.init(&mut state, &mut r);
        self.stem.1.init(&mut state);
        for stage in &self.stages {
            for block in stage {
                block.init(&mut state, &mut r);
            }
        }
        state
    }

    /// Dense or sparse forward on a tape. `mask`, when given, must be aligned
    /// with the pyramid strides (validated by [`BatchMask::new`]).
    pub fn forward(
        &self,
        f: &mut Fwd,
        images: Var,
        mask: Option<&BatchMask>,
    ) -> Result<PyramidVars> {
        let shape = f.tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::validation(format!(
                "encoder expects (B,3,S,S), got {shape:?}"
            )));
        }
        let side = shape[2];
        if shape[3] != side {
            return Err(Error::validation("encoder expects square inputs"));
        }
        if side % 32 != 0 {
            return Err(Error::validation(format!(
                "input side {side} must be a multiple of 32"
            )));
        }

        let strides_masks: Option<(Array4<f64>, [Array4<f64>; 4])> = match mask {
            Some(bm) => {
                if bm.plans.len() != shape[0] {
                    return Err(Error::validation(format!(
                        "{} mask plans for batch of {}",
                        bm.plans.len(),
                        shape[0]
                    )));
                }
                if bm.plans[0].grid_h * bm.plans[0].patch_size != side {
                    return Err(Error::validation("mask grid does not cover the image"));
                }
                let stem_mask = bm.valid4(2)?;
                let level_masks = [
                    bm.valid4(PYRAMID_STRIDES[0])?,
                    bm.valid4(PYRAMID_STRIDES[1])?,
                    bm.valid4(PYRAMID_STRIDES[2])?,
                    bm.valid4(PYRAMID_STRIDES[3])?,
                ];
                Some((stem_mask, level_masks))
            }
            None => None,
        };

        // zero hidden patches before any computation sees them
        let x = match (&strides_masks, mask) {
            (Some(_), Some(bm)) => {
                let pix = bm.valid4(1)?;
                let g = BatchMask::gate_array(&pix, 3);
                f.tape.mul_const(images, &g)
            }
            _ => images,
        };

        let stem_mask = strides_masks.as_ref().map(|(s, _)| s);
        let mut y = self.stem.0.forward(f, x);
        y = self.stem.1.forward(f, y, stem_mask);
        y = f.tape.relu(y);
        if let Some(m) = stem_mask {
            let g = BatchMask::gate_array(m, self.spec.stage_channels[0]);
            y = f.tape.mul_const(y, &g);
        }

        let mut levels = [0usize; 4];
        let mut prev_mask: Option<&Array4<f64>> = stem_mask;
        for si in 0..4 {
            let level_mask = strides_masks.as_ref().map(|(_, lm)| &lm[si]);
            for (bi, block) in self.stages[si].iter().enumerate() {
                let m_in = if bi == 0 { prev_mask } else { level_mask };
                y = block.forward(f, y, m_in, level_mask);
            }
            levels[si] = y;
            prev_mask = level_mask;
        }
        Ok(PyramidVars {
            levels,
            valid: strides_masks.map(|(_, lm)| lm),
        })
    }

    /// Convenience value-level forward (fresh tape, no gradients).
    pub fn encode(
        &self,
        state: &ModelState,
        images: &Array4<f64>,
        training: bool,
    ) -> Result<FeaturePyramid> {
        self.encode_impl(state, images, None, training)
    }

    /// Sparse value-level forward; outputs at masked positions are zero.
    pub fn encode_sparse(
        &self,
        state: &ModelState,
        images: &Array4<f64>,
        mask: &BatchMask,
        training: bool,
    ) -> Result<FeaturePyramid> {
        self.encode_impl(state, images, Some(mask), training)
    }

    fn encode_impl(
        &self,
        state: &ModelState,
        images: &Array4<f64>,
        mask: Option<&BatchMask>,
        training: bool,
    ) -> Result<FeaturePyramid> {
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, state, training);
        let x = f.tape.constant(images.clone().into_dyn());
        let pyr = self.forward(&mut f, x, mask)?;
        let levels = pyr.levels.map(|v| tape.value(v).clone());
        Ok(FeaturePyramid {
            levels,
            valid: pyr.valid,
        })
    }
}

/// Two-layer MLP head (Linear-BN-ReLU-Linear) used for projection and
/// prediction.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub prefix: String,
    l1: Linear,
    bn: BatchNorm1d,
    l2: Linear,
}

impl MlpHead {
    pub fn new(prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            l1: Linear::new(format!("{prefix}.fc1"), d_in, hidden),
            bn: BatchNorm1d::new(format!("{prefix}.bn"), hidden),
            l2: Linear::new(format!("{prefix}.fc2"), hidden, d_out),
        }
    }

    pub fn init(&self, state: &mut ModelState, seed: u64) {
        let mut r = rng::rng(seed, "mlp-init", &[]);
        self.l1.init(state, &mut r);
        self.bn.init(state);
        self.l2.init(state, &mut r);
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let h = self.l1.forward(f, x);
        let h = self.bn.forward(f, h);
        let h = f.tape.relu(h);
        self.l2.forward(f, h)
    }
}

/// Three fully connected layers ending in four logits; `classify` applies
/// the softmax.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

pub const CLASSIFIER_WIDTHS: (usize, usize, usize) = (512, 128, 4);

impl ClassifierHead {
    pub fn new(d_in: usize) -> Self {
        let (w1, w2, out) = CLASSIFIER_WIDTHS;
        Self {
            fc1: Linear::new("classifier.fc1", d_in, w1),
            fc2: Linear::new("classifier.fc2", w1, w2),
            fc3: Linear::new("classifier.fc3", w2, out),
        }
    }

    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut state = ModelState::new();
        let mut r = rng::rng(seed, "classifier-init", &[]);
        self.fc1.init(&mut state, &mut r);
        self.fc2.init(&mut state, &mut r);
        self.fc3.init(&mut state, &mut r);
        state
    }

    pub fn logits(&self, f: &mut Fwd, features: Var) -> Var {
        let h = self.fc1.forward(f, features);
        let h = f.tape.relu(h);
        let h = self.fc2.forward(f, h);
        let h = f.tape.relu(h);
        self.fc3.forward(f, h)
    }

    /// Class probabilities (rows sum to 1).
    pub fn classify(&self, f: &mut Fwd, features: Var) -> Var {
        let l = self.logits(f, features);
        f.tape.softmax_rows(l)
    }
}

/// Pool the deepest pyramid level into a (B,C) embedding.
pub fn pooled_embedding(f: &mut Fwd, pyr: &PyramidVars) -> Var {
    f.tape.global_avg_pool(pyr.levels[3])
}
