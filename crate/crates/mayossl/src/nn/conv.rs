//! Spatial operations: 2-d convolution (im2col + GEMM), pooling, nearest
//! upsampling, channel bias, and patch extraction/standardization.

use super::{BackFn, Tape, Var};
use ndarray::{Array2, Array4, ArrayD, Ix1, Ix3, Ix4, IxDyn};
use rayon::prelude::*;

fn as4(a: &ArrayD<f64>) -> Array4<f64> {
    a.view()
        .into_dimensionality::<Ix4>()
        .expect("expected 4-d array")
        .to_owned()
}

/// Unfold `x` (B,C,H,W) into (C*k*k, B*OH*OW) columns.
fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let rows = c * k * k;
    let cols = b * oh * ow;
    let mut out = Array2::<f64>::zeros((rows, cols));
    let out_slice = out.as_slice_mut().unwrap();
    out_slice
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| {
            let cc = r / (k * k);
            let ki = (r / k) % k;
            let kj = r % k;
            for bi in 0..b {
                let xbase = (bi * c + cc) * h * w;
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    let qbase = (bi * oh + ohi) * ow;
                    if ih < 0 || ih >= h as isize {
                        continue; // row stays zero
                    }
                    let xrow = xbase + ih as usize * w;
                    for owi in 0..ow {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            row[qbase + owi] = xs[xrow + iw as usize];
                        }
                    }
                }
            }
        });
    out
}

/// Fold (C*k*k, B*OH*OW) columns back into (B,C,H,W), accumulating overlaps.
fn col2im(
    cols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (b, c, h, w) = dims;
    let cs = cols.as_slice().expect("col2im: non-contiguous");
    let ncols = b * oh * ow;
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    let out_slice = out.as_slice_mut().unwrap();
    // parallel over batch entries: each writes a disjoint slab
    out_slice
        .par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(bi, slab)| {
            for cc in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let r = (cc * k + ki) * k + kj;
                        let rbase = r * ncols;
                        for ohi in 0..oh {
                            let ih = (ohi * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let sbase = cc * h * w + ih as usize * w;
                            let qbase = rbase + (bi * oh + ohi) * ow;
                            for owi in 0..ow {
                                let iw = (owi * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    slab[sbase + iw as usize] += cs[qbase + owi];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

impl Tape {
    /// 2-d convolution: x (B,C,H,W) * w (O,C,k,k) -> (B,O,OH,OW).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let x4 = as4(&xv);
        let w4 = as4(&wv);
        let (b, c, h, wdt) = x4.dim();
        let (o, wc, k, k2) = w4.dim();
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert!(h + 2 * pad >= k && wdt + 2 * pad >= k, "conv2d input too small");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wdt + 2 * pad - k) / stride + 1;

        let cols = std::rc::Rc::new(im2col(&x4, k, stride, pad, oh, ow));
        let w_mat = w4.to_shape((o, c * k * k)).unwrap().to_owned();
        let y_mat = w_mat.dot(&*cols); // (O, B*OH*OW)
        let y = y_mat
            .into_shape_with_order((o, b, oh, ow))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_dyn();

        let (nx, nw) = (self.needs_grad[x], self.needs_grad[w]);
        let back: Option<BackFn> = if nx || nw {
            let cols_c = std::rc::Rc::clone(&cols);
            Some(Box::new(move |g, store| {
                let g4 = as4(g);
                let g_mat = g4
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((o, b * oh * ow))
                    .unwrap();
                if nw {
                    let dw = g_mat.dot(&cols_c.t());
                    store.accumulate(
                        w,
                        dw.into_shape_with_order((o, c, k, k)).unwrap().into_dyn(),
                    );
                }
                if nx {
                    let w4b = as4(&wv);
                    let w_mat = w4b.to_shape((o, c * k * k)).unwrap().to_owned();
                    let dcols = w_mat.t().dot(&g_mat);
                    let dx = col2im(&dcols, (b, c, h, wdt), k, stride, pad, oh, ow);
                    store.accumulate(x, dx.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(y, nx || nw, back)
    }

    /// Add a per-channel bias (C,) to (B,C,H,W).
    pub fn add_bias_channel(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.rc(x), self.rc(bias));
        let x4 = as4(&xv);
        let b1 = bv
            .view()
            .into_dimensionality::<Ix1>()
            .expect("channel bias must be 1-d")
            .to_owned();
        let (b, c, h, w) = x4.dim();
        assert_eq!(c, b1.len(), "channel bias width mismatch");
        let mut out = x4;
        for bi in 0..b {
            for ci in 0..c {
                let add = b1[ci];
                out.index_axis_mut(ndarray::Axis(0), bi)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .mapv_inplace(|v| v + add);
            }
        }
        let (nx, nb) = (self.needs_grad[x], self.needs_grad[bias]);
        let back: Option<BackFn> = if nx || nb {
            Some(Box::new(move |g, store| {
                if nx {
                    store.accumulate(x, g.clone());
                }
                if nb {
                    let g4 = as4(g);
                    let mut db = ndarray::Array1::<f64>::zeros(c);
                    for bi in 0..b {
                        for ci in 0..c {
                            db[ci] += g4
                                .index_axis(ndarray::Axis(0), bi)
                                .index_axis(ndarray::Axis(0), ci)
                                .sum();
                        }
                    }
                    store.accumulate(bias, db.into_dyn());
                }
                let _ = (h, w);
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), nx || nb, back)
    }

    /// Global average pooling (B,C,H,W) -> (B,C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let x4 = as4(&xv);
        let (b, c, h, w) = x4.dim();
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = x4
                    .index_axis(ndarray::Axis(0), bi)
                    .index_axis(ndarray::Axis(0), ci)
                    .mean()
                    .unwrap();
            }
        }
        let nx = self.needs_grad[x];
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g, store| {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let v = g2[[bi, ci]] * scale;
                        dx.index_axis_mut(ndarray::Axis(0), bi)
                            .index_axis_mut(ndarray::Axis(0), ci)
                            .fill(v);
                    }
                }
                store.accumulate(x, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), nx, back)
    }

    /// Nearest-neighbour 2x upsampling (B,C,H,W) -> (B,C,2H,2W).
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let x4 = as4(&xv);
        let (b, c, h, w) = x4.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = x4[[bi, ci, hi, wi]];
                        out[[bi, ci, 2 * hi, 2 * wi]] = v;
                        out[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                        out[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                        out[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                    }
                }
            }
        }
        let nx = self.needs_grad[x];
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g, store| {
                let g4 = as4(g);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[[bi, ci, hi, wi]] = g4[[bi, ci, 2 * hi, 2 * wi]]
                                    + g4[[bi, ci, 2 * hi, 2 * wi + 1]]
                                    + g4[[bi, ci, 2 * hi + 1, 2 * wi]]
                                    + g4[[bi, ci, 2 * hi + 1, 2 * wi + 1]];
                            }
                        }
                    }
                }
                store.accumulate(x, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), nx, back)
    }

    /// Split (B,C,S,S) into non-overlapping patches -> (B, P, C*p*p) where
    /// P = (S/p)^2, patches in row-major grid order.
    pub fn extract_patches(&mut self, x: Var, p: usize) -> Var {
        let xv = self.rc(x);
        let x4 = as4(&xv);
        let (b, c, s, s2) = x4.dim();
        assert_eq!(s, s2, "extract_patches expects square input");
        assert_eq!(s % p, 0, "patch size must divide image side");
        let g = s / p;
        let np = g * g;
        let m = c * p * p;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, np, m]));
        for bi in 0..b {
            for gh in 0..g {
                for gw in 0..g {
                    let pi = gh * g + gw;
                    for ci in 0..c {
                        for ph in 0..p {
                            for pw in 0..p {
                                out[[bi, pi, (ci * p + ph) * p + pw]] =
                                    x4[[bi, ci, gh * p + ph, gw * p + pw]];
                            }
                        }
                    }
                }
            }
        }
        let nx = self.needs_grad[x];
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |gr, store| {
                let g3 = gr.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array4::<f64>::zeros((b, c, s, s));
                for bi in 0..b {
                    for gh in 0..g {
                        for gw in 0..g {
                            let pi = gh * g + gw;
                            for ci in 0..c {
                                for ph in 0..p {
                                    for pw in 0..p {
                                        dx[[bi, ci, gh * p + ph, gw * p + pw]] =
                                            g3[[bi, pi, (ci * p + ph) * p + pw]];
                                    }
                                }
                            }
                        }
                    }
                }
                store.accumulate(x, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Standardize each patch vector of (B,P,M) to zero mean / unit variance
    /// (population statistics), guarded by `eps` for constant patches.
    pub fn patch_standardize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.rc(x);
        let x3 = xv
            .view()
            .into_dimensionality::<Ix3>()
            .expect("patch_standardize expects (B,P,M)")
            .to_owned();
        let (b, p, m) = x3.dim();
        let mut out = x3.clone();
        let mut sigmas = Array2::<f64>::zeros((b, p));
        for bi in 0..b {
            for pi in 0..p {
                let mut lane = out.index_axis_mut(ndarray::Axis(0), bi);
                let mut row = lane.index_axis_mut(ndarray::Axis(0), pi);
                let mu = row.mean().unwrap();
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                let sigma = var.sqrt();
                sigmas[[bi, pi]] = sigma;
                row.mapv_inplace(|v| (v - mu) / (sigma + eps));
            }
        }
        let yc = out.clone();
        let nx = self.needs_grad[x];
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |gr, store| {
                let g3 = gr.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((b, p, m));
                for bi in 0..b {
                    for pi in 0..p {
                        let sigma = sigmas[[bi, pi]];
                        let grow = g3.index_axis(ndarray::Axis(0), bi);
                        let grow = grow.index_axis(ndarray::Axis(0), pi);
                        let yrow = yc.index_axis(ndarray::Axis(0), bi);
                        let yrow = yrow.index_axis(ndarray::Axis(0), pi);
                        let gmean = grow.mean().unwrap();
                        let gydot = grow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(&a, &c)| a * c)
                            .sum::<f64>()
                            / m as f64;
                        for j in 0..m {
                            let mut v = (grow[j] - gmean) / (sigma + eps);
                            if sigma > 1e-12 {
                                v -= yrow[j] * gydot / sigma;
                            }
                            dx[[bi, pi, j]] = v;
                        }
                    }
                }
                store.accumulate(x, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), nx, back)
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_err;
    use super::*;
    use rand::Rng;

    fn rand4(shape: [usize; 4], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::rng(seed, "conv-test", &[]);
        ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 batch, 1 channel, 3x3 input, 2x2 kernel, stride 1, no pad
        let x = ndarray::arr3(&[[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]])
            .insert_axis(ndarray::Axis(0))
            .into_dyn();
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.constant(w);
        let y = t.conv2d(xv, wv, 1, 0);
        let yv = as4(t.value(y));
        assert_eq!(yv.dim(), (1, 1, 2, 2));
        assert_eq!(yv[[0, 0, 0, 0]], 1.0 + 5.0);
        assert_eq!(yv[[0, 0, 0, 1]], 2.0 + 6.0);
        assert_eq!(yv[[0, 0, 1, 0]], 4.0 + 8.0);
        assert_eq!(yv[[0, 0, 1, 1]], 5.0 + 9.0);
    }

    #[test]
    fn conv2d_shapes_with_stride_and_pad() {
        let x = rand4([2, 3, 8, 8], 1);
        let w = rand4([5, 3, 3, 3], 2);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.constant(w);
        let y = t.conv2d(xv, wv, 2, 1);
        assert_eq!(t.value(y).shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn conv2d_gradcheck_input_and_weight() {
        let x = rand4([2, 2, 5, 5], 3);
        let err = max_rel_err(&x, &|t, v| {
            let w = t.constant(rand4([3, 2, 3, 3], 4));
            let y = t.conv2d(v, w, 2, 1);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(err < 1e-5, "conv2d dx err {err}");

        let w = rand4([3, 2, 3, 3], 5);
        let err = max_rel_err(&w, &|t, v| {
            let x = t.constant(rand4([2, 2, 5, 5], 6));
            let y = t.conv2d(x, v, 1, 1);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(err < 1e-5, "conv2d dw err {err}");
    }

    #[test]
    fn pool_upsample_bias_gradchecks() {
        let x = rand4([2, 3, 4, 4], 7);
        let err = max_rel_err(&x, &|t, v| {
            let p = t.global_avg_pool(v);
            let p2 = t.mul(p, p);
            t.sum_all(p2)
        });
        assert!(err < 1e-6, "pool err {err}");

        let err = max_rel_err(&x, &|t, v| {
            let u = t.upsample_nearest2(v);
            let c = t.constant(rand4([2, 3, 8, 8], 8));
            let m = t.mul(u, c);
            t.sum_all(m)
        });
        assert!(err < 1e-6, "upsample err {err}");

        let bias = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -0.2, 0.3]).unwrap();
        let err = max_rel_err(&bias, &|t, v| {
            let x = t.constant(rand4([2, 3, 4, 4], 9));
            let y = t.add_bias_channel(x, v);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(err < 1e-6, "bias err {err}");
    }

    #[test]
    fn patches_roundtrip_and_standardize_gradcheck() {
        let x = rand4([2, 3, 8, 8], 10);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let pat = t.extract_patches(xv, 4);
        assert_eq!(t.value(pat).shape(), &[2, 4, 48]);

        let err = max_rel_err(&x, &|t, v| {
            let p = t.extract_patches(v, 4);
            let s = t.patch_standardize(p, 1e-6);
            let c = t.constant(rand4([2, 4, 6, 8], 11).into_shape_with_order(IxDyn(&[2, 4, 48])).unwrap());
            let m = t.mul(s, c);
            t.sum_all(m)
        });
        assert!(err < 1e-4, "patch standardize err {err}");
    }

    #[test]
    fn standardized_patches_have_zero_mean_unit_std() {
        let x = rand4([1, 3, 8, 8], 12);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let p = t.extract_patches(xv, 4);
        let s = t.patch_standardize(p, 1e-6);
        let sv = t.value(s);
        for pi in 0..4 {
            let lane = sv.index_axis(ndarray::Axis(0), 0);
            let lane = lane.index_axis(ndarray::Axis(0), pi);
            let mu = lane.mean().unwrap();
            let var = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / lane.len() as f64;
            assert!(mu.abs() < 1e-5);
            assert!((var.sqrt() - 1.0).abs() < 1e-4);
        }
    }
}
