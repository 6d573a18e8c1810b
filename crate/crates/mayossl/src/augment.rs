//! Seed-deterministic stochastic view generation: two-view pipelines for the
//! momentum methods, multi-crop for the clustering method, and patch-mask
//! plans for masked reconstruction.
//!
//! Every operation is a pure function of (inputs, seed); parallel callers
//! derive per-record seeds so results are order-independent.

use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Photometric and geometric parameters for a single-view pipeline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub color_jitter_strength: f64,
    pub blur_prob: f64,
    pub output_side: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            flip_prob: 0.5,
            color_jitter_strength: 0.4,
            blur_prob: 0.5,
            output_side: 64,
            norm_mean: [0.5, 0.5, 0.5],
            norm_std: [0.5, 0.5, 0.5],
        }
    }
}

impl AugmentConfig {
    /// Deterministic resize+normalize pipeline (no stochastic transforms).
    pub fn deterministic(output_side: usize) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter_strength: 0.0,
            blur_prob: 0.0,
            output_side,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::validation(format!(
                "crop_scale_range ({lo},{hi}) outside (0,1]"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Crop-count and crop-size parameters for multi-crop view generation.
/// Global crops sample areas in (local_scale_range.1, 1.0]; local crops
/// sample from local_scale_range.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MultiCropConfig {
    pub n_global: usize,
    pub global_side: usize,
    pub n_local: usize,
    pub local_side: usize,
    pub local_scale_range: (f64, f64),
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            global_side: 64,
            n_local: 4,
            local_side: 32,
            local_scale_range: (0.15, 0.4),
        }
    }
}

impl MultiCropConfig {
    fn validate(&self) -> Result<()> {
        if self.n_global < 2 {
            return Err(Error::validation("multi-crop requires n_global >= 2"));
        }
        if self.global_side <= self.local_side {
            return Err(Error::validation(
                "global_side must exceed local_side",
            ));
        }
        Ok(())
    }
}

/// Patch-level mask: which patches of an image are hidden.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub masked: Array2<bool>,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each patch masked by an independent Bernoulli(mask_ratio) draw.
    Bernoulli,
    /// Exactly ceil(mask_ratio * n_patches) patches masked.
    ExactCount,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Validity map (1 = visible) at a feature stride; patch_size must be a
    /// multiple of the stride.
    pub fn valid_at_stride(&self, stride: usize) -> Result<Array2<f64>> {
        if self.patch_size % stride != 0 {
            return Err(Error::validation(format!(
                "patch size {} not divisible by stride {stride}",
                self.patch_size
            )));
        }
        let cells = self.patch_size / stride;
        let (h, w) = (self.grid_h * cells, self.grid_w * cells);
        let mut out = Array2::<f64>::zeros((h, w));
        for hi in 0..h {
            for wi in 0..w {
                if !self.masked[[hi / cells, wi / cells]] {
                    out[[hi, wi]] = 1.0;
                }
            }
        }
        Ok(out)
    }
}

/// Independent Bernoulli (or exact-count) patch masking.
pub fn make_mask(
    image_side: usize,
    patch_size: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    make_mask_with_mode(image_side, patch_size, mask_ratio, MaskMode::Bernoulli, seed)
}

pub fn make_mask_with_mode(
    image_side: usize,
    patch_size: usize,
    mask_ratio: f64,
    mode: MaskMode,
    seed: u64,
) -> Result<MaskPlan> {
    if patch_size == 0 || image_side % patch_size != 0 {
        return Err(Error::validation(format!(
            "patch size {patch_size} does not divide image side {image_side}"
        )));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::validation(format!(
            "mask_ratio {mask_ratio} outside [0,1]"
        )));
    }
    let g = image_side / patch_size;
    let mut masked = Array2::from_elem((g, g), false);
    let mut r = rng::rng(seed, "mask", &[]);
    match mode {
        MaskMode::Bernoulli => {
            for m in masked.iter_mut() {
                *m = r.gen_range(0.0..1.0) < mask_ratio;
            }
        }
        MaskMode::ExactCount => {
            let n = g * g;
            let k = (mask_ratio * n as f64).ceil() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut r);
            for &i in order.iter().take(k.min(n)) {
                masked[[i / g, i % g]] = true;
            }
        }
    }
    Ok(MaskPlan {
        grid_h: g,
        grid_w: g,
        patch_size,
        masked,
        mask_ratio,
    })
}

// ---------------------------------------------------------------------------
// pixel transforms
// ---------------------------------------------------------------------------

fn check_image(img: &Array3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::validation(format!(
            "degenerate image shape ({h},{w},{c})"
        )));
    }
    Ok(())
}

/// Bilinear resize of HxWx3 to (out_h, out_w).
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, _) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, 3));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = img[[y0, x0, c]] * (1.0 - wx) + img[[y0, x1, c]] * wx;
                let bot = img[[y1, x0, c]] * (1.0 - wx) + img[[y1, x1, c]] * wx;
                out[[oy, ox, c]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Random area-and-aspect crop, resized to a square of `out_side`.
/// With scale range (1,1) on a square image this is the full frame.
fn random_resized_crop(
    img: &Array3<f64>,
    scale: (f64, f64),
    out_side: usize,
    r: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let area = (h * w) as f64;
    let mut chosen: Option<(usize, usize, usize, usize)> = None;
    for _ in 0..10 {
        let a = if scale.0 >= scale.1 {
            scale.0
        } else {
            r.gen_range(scale.0..scale.1)
        };
        let ratio = r.gen_range(0.75..(4.0 / 3.0));
        let target = a * area;
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = if ch == h { 0 } else { r.gen_range(0..=h - ch) };
            let x0 = if cw == w { 0 } else { r.gen_range(0..=w - cw) };
            chosen = Some((y0, x0, ch, cw));
            break;
        }
    }
    let (y0, x0, ch, cw) = chosen.unwrap_or((0, 0, h, w));
    let crop = img
        .slice(ndarray::s![y0..y0 + ch, x0..x0 + cw, ..])
        .to_owned();
    resize_bilinear(&crop, out_side, out_side)
}

fn hflip(img: &mut Array3<f64>) {
    let w = img.dim().1;
    for mut row in img.axis_iter_mut(Axis(0)) {
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap([x, c], [w - 1 - x, c]);
            }
        }
    }
}

fn color_jitter(img: &mut Array3<f64>, strength: f64, r: &mut ChaCha8Rng) {
    if strength <= 0.0 {
        return;
    }
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    let brightness = r.gen_range(lo..hi);
    let contrast = r.gen_range(lo..hi);
    let saturation = r.gen_range(lo..hi);

    img.mapv_inplace(|v| v * brightness);
    let mean_lum = img.mean().unwrap_or(0.5);
    img.mapv_inplace(|v| (v - mean_lum) * contrast + mean_lum);
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let gray = (img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]]) / 3.0;
            for c in 0..3 {
                img[[y, x, c]] = gray + (img[[y, x, c]] - gray) * saturation;
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn gaussian_blur3(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k1 = (-1.0 / (2.0 * sigma * sigma) as f64).exp();
    let norm = 1.0 + 2.0 * k1;
    let w = [k1 / norm, 1.0 / norm, k1 / norm];
    let (h, wd, _) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut tmp = Array3::<f64>::zeros(img.raw_dim());
    for y in 0..h {
        for x in 0..wd {
            for c in 0..3 {
                let mut acc = 0.0;
                for (di, wi) in (-1..=1).zip(w.iter()) {
                    acc += img[[y, reflect(x as isize + di, wd), c]] * wi;
                }
                tmp[[y, x, c]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros(img.raw_dim());
    for y in 0..h {
        for x in 0..wd {
            for c in 0..3 {
                let mut acc = 0.0;
                for (di, wi) in (-1..=1).zip(w.iter()) {
                    acc += tmp[[reflect(y as isize + di, h), x, c]] * wi;
                }
                out[[y, x, c]] = acc;
            }
        }
    }
    out
}

fn normalize(img: &mut Array3<f64>, mean: &[f64; 3], std: &[f64; 3]) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img[[y, x, c]] = (img[[y, x, c]] - mean[c]) / std[c];
            }
        }
    }
}

/// One stochastically augmented view of an image.
pub fn augment_view(img: &Array3<f64>, cfg: &AugmentConfig, r: &mut ChaCha8Rng) -> Array3<f64> {
    let mut v = random_resized_crop(img, cfg.crop_scale_range, cfg.output_side, r);
    if cfg.flip_prob > 0.0 && r.gen_range(0.0..1.0) < cfg.flip_prob {
        hflip(&mut v);
    }
    color_jitter(&mut v, cfg.color_jitter_strength, r);
    if cfg.blur_prob > 0.0 && r.gen_range(0.0..1.0) < cfg.blur_prob {
        let sigma = r.gen_range(0.1..1.5);
        v = gaussian_blur3(&v, sigma);
    }
    normalize(&mut v, &cfg.norm_mean, &cfg.norm_std);
    v
}

/// Two independently sampled augmentations of the same image.
pub fn two_views(
    img: &Array3<f64>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_image(img)?;
    cfg.validate()?;
    let a = augment_view(img, cfg, &mut rng::rng(seed, "two-views", &[0]));
    let b = augment_view(img, cfg, &mut rng::rng(seed, "two-views", &[1]));
    Ok((a, b))
}

/// Multi-crop views: n_global crops at global_side followed by n_local crops
/// at local_side, in that order. Photometric parameters default to the
/// standard stack; see [`multi_crop_with`].
pub fn multi_crop(
    img: &Array3<f64>,
    cfg: &MultiCropConfig,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    multi_crop_with(img, cfg, &AugmentConfig::default(), seed)
}

pub fn multi_crop_with(
    img: &Array3<f64>,
    cfg: &MultiCropConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    check_image(img)?;
    cfg.validate()?;
    let global_scale = (cfg.local_scale_range.1.min(1.0), 1.0);
    let mut out = Vec::with_capacity(cfg.n_global + cfg.n_local);
    for i in 0..cfg.n_global {
        let view_cfg = AugmentConfig {
            crop_scale_range: global_scale,
            output_side: cfg.global_side,
            ..aug.clone()
        };
        out.push(augment_view(
            img,
            &view_cfg,
            &mut rng::rng(seed, "multi-crop-global", &[i as u64]),
        ));
    }
    for i in 0..cfg.n_local {
        let view_cfg = AugmentConfig {
            crop_scale_range: cfg.local_scale_range,
            output_side: cfg.local_side,
            ..aug.clone()
        };
        out.push(augment_view(
            img,
            &view_cfg,
            &mut rng::rng(seed, "multi-crop-local", &[i as u64]),
        ));
    }
    Ok(out)
}

/// Stack HxWx3 views into a (B,3,S,S) batch.
pub fn to_chw_batch(views: &[Array3<f64>]) -> Array4<f64> {
    assert!(!views.is_empty());
    let (h, w, _) = views[0].dim();
    let mut out = Array4::<f64>::zeros((views.len(), 3, h, w));
    for (b, v) in views.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[b, c, y, x]] = v[[y, x, c]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut r = rng::rng(seed, "aug-test-img", &[]);
        Array3::from_shape_fn((h, w, 3), |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn identity_pipeline_yields_resized_normalized_image() {
        let img = test_image(64, 64, 1);
        let cfg = AugmentConfig::deterministic(64);
        let (a, b) = two_views(&img, &cfg, 5).unwrap();
        let mut expect = img.clone();
        normalize(&mut expect, &cfg.norm_mean, &cfg.norm_std);
        assert!(a.iter().zip(expect.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_bit_identical_different_seed_differs() {
        let img = test_image(80, 80, 2);
        let cfg = AugmentConfig::default();
        let (a1, b1) = two_views(&img, &cfg, 9).unwrap();
        let (a2, b2) = two_views(&img, &cfg, 9).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let (a3, b3) = two_views(&img, &cfg, 10).unwrap();
        assert!(a1 != a3 || b1 != b3, "adjacent seeds must differ somewhere");
    }

    #[test]
    fn degenerate_image_is_rejected() {
        let img = Array3::<f64>::zeros((0, 32, 3));
        assert!(two_views(&img, &AugmentConfig::default(), 0).is_err());
    }

    #[test]
    fn multi_crop_shapes_and_order() {
        let img = test_image(96, 96, 3);
        let cfg = MultiCropConfig {
            n_global: 2,
            global_side: 64,
            n_local: 4,
            local_side: 32,
            local_scale_range: (0.2, 0.5),
        };
        let views = multi_crop(&img, &cfg, 7).unwrap();
        let sides: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
        assert_eq!(sides, vec![64, 64, 32, 32, 32, 32]);

        let no_local = MultiCropConfig {
            n_local: 0,
            ..cfg.clone()
        };
        assert_eq!(multi_crop(&img, &no_local, 7).unwrap().len(), 2);

        let again = multi_crop(&img, &cfg, 7).unwrap();
        assert_eq!(views, again);
    }

    #[test]
    fn mask_ratio_endpoints_and_grid_arithmetic() {
        let none = make_mask(224, 32, 0.0, 1).unwrap();
        assert_eq!(none.n_patches(), 49);
        assert_eq!(none.n_masked(), 0);
        let all = make_mask(224, 32, 1.0, 1).unwrap();
        assert_eq!(all.n_masked(), 49);
        assert!(make_mask(224, 30, 0.5, 1).is_err());
    }

    #[test]
    fn bernoulli_calibration_on_many_seeds() {
        // 10_000 seeded draws on a 7x7 grid at ratio 0.6
        let mut masked = 0usize;
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let m = make_mask(224, 32, 0.6, seed).unwrap();
            masked += m.n_masked();
            total += m.n_patches();
        }
        let frac = masked as f64 / total as f64;
        assert!(
            (0.58..=0.62).contains(&frac),
            "empirical masked fraction {frac}"
        );
    }

    #[test]
    fn exact_count_mode_masks_ceil() {
        for seed in 0..20 {
            let m = make_mask_with_mode(64, 16, 0.6, MaskMode::ExactCount, seed).unwrap();
            // 16 patches, ceil(0.6*16) = 10
            assert_eq!(m.n_masked(), 10);
        }
    }

    #[test]
    fn valid_mask_downsampling() {
        let mut plan = make_mask(64, 32, 0.0, 0).unwrap();
        plan.masked[[0, 1]] = true;
        let v = plan.valid_at_stride(16).unwrap();
        assert_eq!(v.dim(), (4, 4));
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[0, 3]], 0.0);
        assert_eq!(v[[1, 3]], 0.0);
        assert_eq!(v[[2, 2]], 1.0);
        assert!(plan.valid_at_stride(3).is_err());
    }

    #[test]
    fn emitted_views_stay_in_normalized_range() {
        let img = test_image(72, 72, 6);
        let cfg = AugmentConfig::default();
        for seed in 0..8 {
            let (a, b) = two_views(&img, &cfg, seed).unwrap();
            for v in a.iter().chain(b.iter()) {
                assert!(v.is_finite());
                let lo = (0.0 - cfg.norm_mean[0]) / cfg.norm_std[0] - 1e-9;
                let hi = (1.0 - cfg.norm_mean[0]) / cfg.norm_std[0] + 1e-9;
                assert!((lo..=hi).contains(v), "value {v} outside [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn chw_batch_layout() {
        let img = test_image(16, 16, 8);
        let batch = to_chw_batch(&[img.clone()]);
        assert_eq!(batch.dim(), (1, 3, 16, 16));
        assert_eq!(batch[[0, 2, 5, 7]], img[[5, 7, 2]]);
    }
}
