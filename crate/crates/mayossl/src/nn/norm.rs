//! Batch normalization with optional validity masks.
//!
//! In sparse (masked) mode the batch statistics are computed over valid
//! positions only; masked positions are still normalized with those
//! statistics (callers gate them to zero afterwards). Excluding masked
//! positions from the statistics is what keeps the mask from leaking into
//! visible-position features through normalization.

use super::{BackFn, Tape, Var};
use ndarray::{Array1, Array4, ArrayD, Ix1, Ix4};

pub const BN_EPS: f64 = 1e-5;

fn as4(a: &ArrayD<f64>) -> Array4<f64> {
    a.view().into_dimensionality::<Ix4>().unwrap().to_owned()
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

impl Tape {
    /// Training-mode 2-d batch norm. `mask`, when present, is (B,1,H,W) of
    /// {0,1}; statistics run over mask=1 positions only. Returns the output
    /// together with the batch mean/variance per channel (for running-stat
    /// updates). Channels with zero valid positions output zero.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<&Array4<f64>>,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let (xv, gv, bv) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let x4 = as4(&xv);
        let (b, c, h, w) = x4.dim();
        let g1 = as1(&gv);
        let b1 = as1(&bv);
        assert_eq!(g1.len(), c, "batchnorm gamma width mismatch");

        let m4 = mask.cloned();
        if let Some(m) = &m4 {
            assert_eq!(m.dim(), (b, 1, h, w), "batchnorm mask shape mismatch");
        }
        let n_valid: f64 = match &m4 {
            Some(m) => m.sum(),
            None => (b * h * w) as f64,
        };

        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        if n_valid > 0.0 {
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mv = m4.as_ref().map_or(1.0, |m| m[[bi, 0, hi, wi]]);
                            s += mv * x4[[bi, ci, hi, wi]];
                        }
                    }
                }
                mean[ci] = s / n_valid;
                let mut v = 0.0;
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mv = m4.as_ref().map_or(1.0, |m| m[[bi, 0, hi, wi]]);
                            let d = x4[[bi, ci, hi, wi]] - mean[ci];
                            v += mv * d * d;
                        }
                    }
                }
                var[ci] = v / n_valid;
            }
        } else {
            var.fill(1.0);
        }

        let mut out = Array4::<f64>::zeros((b, c, h, w));
        let mut xhat = Array4::<f64>::zeros((b, c, h, w));
        if n_valid > 0.0 {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + BN_EPS).sqrt();
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let xh = (x4[[bi, ci, hi, wi]] - mean[ci]) * inv;
                            xhat[[bi, ci, hi, wi]] = xh;
                            out[[bi, ci, hi, wi]] = g1[ci] * xh + b1[ci];
                        }
                    }
                }
            }
        }

        let (nx, ng, nb2) = (
            self.needs_grad[x],
            self.needs_grad[gamma],
            self.needs_grad[beta],
        );
        let needs = nx || ng || nb2;
        let back: Option<BackFn> = if needs && n_valid > 0.0 {
            let xhat_c = xhat;
            let var_c = var.clone();
            Some(Box::new(move |g, store| {
                let g4 = as4(g);
                let gam = as1(&gv);
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for ci in 0..c {
                    let inv = 1.0 / (var_c[ci] + BN_EPS).sqrt();
                    let mut s1 = 0.0; // sum of upstream grads
                    let mut s2 = 0.0; // sum of upstream grads * xhat
                    for bi in 0..b {
                        for hi in 0..h {
                            for wi in 0..w {
                                let gy = g4[[bi, ci, hi, wi]];
                                s1 += gy;
                                s2 += gy * xhat_c[[bi, ci, hi, wi]];
                            }
                        }
                    }
                    dgamma[ci] = s2;
                    dbeta[ci] = s1;
                    if nx {
                        for bi in 0..b {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let mv =
                                        m4.as_ref().map_or(1.0, |m| m[[bi, 0, hi, wi]]);
                                    let gy = g4[[bi, ci, hi, wi]];
                                    dx[[bi, ci, hi, wi]] = gam[ci]
                                        * inv
                                        * (gy
                                            - mv * (s1 / n_valid)
                                            - mv * xhat_c[[bi, ci, hi, wi]] * (s2 / n_valid));
                                }
                            }
                        }
                    }
                }
                if nx {
                    store.accumulate(x, dx.into_dyn());
                }
                if ng {
                    store.accumulate(gamma, dgamma.into_dyn());
                }
                if nb2 {
                    store.accumulate(beta, dbeta.into_dyn());
                }
            }))
        } else {
            None
        };
        let out_var = self.push(out.into_dyn(), needs && n_valid > 0.0, back);
        (out_var, mean, var)
    }

    /// Eval-mode 2-d batch norm: normalize with fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        run_mean: &Array1<f64>,
        run_var: &Array1<f64>,
    ) -> Var {
        let (xv, gv, bv) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let x4 = as4(&xv);
        let (b, c, h, w) = x4.dim();
        let g1 = as1(&gv);
        let b1 = as1(&bv);
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        let mut xhat = Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let inv = 1.0 / (run_var[ci] + BN_EPS).sqrt();
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        let xh = (x4[[bi, ci, hi, wi]] - run_mean[ci]) * inv;
                        xhat[[bi, ci, hi, wi]] = xh;
                        out[[bi, ci, hi, wi]] = g1[ci] * xh + b1[ci];
                    }
                }
            }
        }
        let (nx, ng, nb2) = (
            self.needs_grad[x],
            self.needs_grad[gamma],
            self.needs_grad[beta],
        );
        let needs = nx || ng || nb2;
        let back: Option<BackFn> = if needs {
            let inv_all: Array1<f64> =
                run_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            Some(Box::new(move |g, store| {
                let g4 = as4(g);
                let gam = as1(&gv);
                if nx {
                    let mut dx = Array4::<f64>::zeros((b, c, h, w));
                    for ci in 0..c {
                        let s = gam[ci] * inv_all[ci];
                        for bi in 0..b {
                            for hi in 0..h {
                                for wi in 0..w {
                                    dx[[bi, ci, hi, wi]] = s * g4[[bi, ci, hi, wi]];
                                }
                            }
                        }
                    }
                    store.accumulate(x, dx.into_dyn());
                }
                if ng || nb2 {
                    let mut dgamma = Array1::<f64>::zeros(c);
                    let mut dbeta = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        for bi in 0..b {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let gy = g4[[bi, ci, hi, wi]];
                                    dgamma[ci] += gy * xhat[[bi, ci, hi, wi]];
                                    dbeta[ci] += gy;
                                }
                            }
                        }
                    }
                    if ng {
                        store.accumulate(gamma, dgamma.into_dyn());
                    }
                    if nb2 {
                        store.accumulate(beta, dbeta.into_dyn());
                    }
                }
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), needs, back)
    }

    /// Training-mode 1-d batch norm over (B,D). Returns (out, mean, var).
    pub fn batchnorm1d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let b = self.value(x).shape()[0];
        let d = self.value(x).shape()[1];
        let x4 = self.reshape(x, &[b, d, 1, 1]);
        // reuse the 2-d kernel with H=W=1 after transposing feature to channel
        let (y, mean, var) = self.batchnorm2d_train(x4, gamma, beta, None);
        let y2 = self.reshape(y, &[b, d]);
        (y2, mean, var)
    }

    /// Eval-mode 1-d batch norm over (B,D).
    pub fn batchnorm1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        run_mean: &Array1<f64>,
        run_var: &Array1<f64>,
    ) -> Var {
        let b = self.value(x).shape()[0];
        let d = self.value(x).shape()[1];
        let x4 = self.reshape(x, &[b, d, 1, 1]);
        let y = self.batchnorm2d_eval(x4, gamma, beta, run_mean, run_var);
        self.reshape(y, &[b, d])
    }
}

/// Validity mask helper for 2-d feature maps: returns (B,1,H,W) of {0,1}.
pub fn ones_mask(b: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::ones((b, 1, h, w))
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_err;
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand4(shape: [usize; 4], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::rng(seed, "norm-test", &[]);
        ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn unmasked_bn_standardizes_channels() {
        let x = rand4([4, 3, 5, 5], 1);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(ArrayD::ones(IxDyn(&[3])));
        let b = t.constant(ArrayD::zeros(IxDyn(&[3])));
        let (y, mean, var) = t.batchnorm2d_train(xv, g, b, None);
        let y4 = as4(t.value(y));
        for ci in 0..3 {
            let ch: Vec<f64> = y4
                .axis_iter(ndarray::Axis(0))
                .flat_map(|s| {
                    s.index_axis(ndarray::Axis(0), ci)
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect();
            let mu: f64 = ch.iter().sum::<f64>() / ch.len() as f64;
            assert!(mu.abs() < 1e-10);
            assert!(mean[ci].is_finite() && var[ci] >= 0.0);
        }
    }

    #[test]
    fn masked_stats_ignore_masked_positions() {
        // Put outliers in masked positions: stats must not move.
        let base = rand4([2, 2, 4, 4], 2);
        let mut poisoned = base.clone();
        let mut mask = Array4::<f64>::ones((2, 1, 4, 4));
        mask[[0, 0, 0, 0]] = 0.0;
        mask[[1, 0, 3, 3]] = 0.0;
        poisoned[[0, 0, 0, 0]] = 1e6;
        poisoned[[1, 1, 3, 3]] = -1e6;

        let stats = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let g = t.constant(ArrayD::ones(IxDyn(&[2])));
            let b = t.constant(ArrayD::zeros(IxDyn(&[2])));
            let (_, mean, var) = t.batchnorm2d_train(xv, g, b, Some(&mask));
            (mean, var)
        };
        let (m1, v1) = stats(&base);
        let (m2, v2) = stats(&poisoned);
        for ci in 0..2 {
            assert!((m1[ci] - m2[ci]).abs() < 1e-12);
            assert!((v1[ci] - v2[ci]).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_train_gradcheck_unmasked_and_masked() {
        let x = rand4([2, 2, 3, 3], 3);
        let err = max_rel_err(&x, &|t, v| {
            let g = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.3));
            let b = t.leaf(ArrayD::from_elem(IxDyn(&[2]), -0.2));
            let (y, _, _) = t.batchnorm2d_train(v, g, b, None);
            let c = t.constant(rand4([2, 2, 3, 3], 4));
            let m = t.mul(y, c);
            t.sum_all(m)
        });
        assert!(err < 1e-4, "bn unmasked dx err {err}");

        let mut mask = Array4::<f64>::ones((2, 1, 3, 3));
        mask[[0, 0, 1, 1]] = 0.0;
        mask[[1, 0, 0, 2]] = 0.0;
        let err = max_rel_err(&x, &|t, v| {
            let g = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 0.8));
            let b = t.leaf(ArrayD::zeros(IxDyn(&[2])));
            let (y, _, _) = t.batchnorm2d_train(v, g, b, Some(&mask));
            let c = t.constant(rand4([2, 2, 3, 3], 5));
            let m = t.mul(y, c);
            t.sum_all(m)
        });
        assert!(err < 1e-4, "bn masked dx err {err}");
    }

    #[test]
    fn bn_gamma_beta_gradcheck() {
        let gamma = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.1, 0.7]).unwrap();
        let err = max_rel_err(&gamma, &|t, v| {
            let x = t.constant(rand4([2, 2, 3, 3], 6));
            let b = t.leaf(ArrayD::zeros(IxDyn(&[2])));
            let (y, _, _) = t.batchnorm2d_train(x, v, b, None);
            let c = t.constant(rand4([2, 2, 3, 3], 7));
            let m = t.mul(y, c);
            t.sum_all(m)
        });
        assert!(err < 1e-5, "bn dgamma err {err}");
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = rand4([2, 2, 3, 3], 8);
        let rm = Array1::from_vec(vec![0.5, -0.5]);
        let rv = Array1::from_vec(vec![2.0, 0.5]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let g = t.constant(ArrayD::ones(IxDyn(&[2])));
        let b = t.constant(ArrayD::zeros(IxDyn(&[2])));
        let y = t.batchnorm2d_eval(xv, g, b, &rm, &rv);
        let y4 = as4(t.value(y));
        let x4 = as4(&x);
        let expect = (x4[[0, 0, 1, 1]] - 0.5) / (2.0f64 + BN_EPS).sqrt();
        assert!((y4[[0, 0, 1, 1]] - expect).abs() < 1e-12);
    }
}
