//! Elementwise, matrix, and reduction operations on the tape.

use super::{BackFn, Tape, Var};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d array")
        .to_owned()
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = &*av + &*bv;
        let (na, nb) = (self.needs_grad[a], self.needs_grad[b]);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g, store| {
                if na {
                    store.accumulate(a, g.clone());
                }
                if nb {
                    store.accumulate(b, g.clone());
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| -x);
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| store.accumulate(a, -g)))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = &*av * &*bv;
        let (na, nb) = (self.needs_grad[a], self.needs_grad[b]);
        let back: Option<BackFn> = if na || nb {
            let (ac, bc) = (av.clone(), bv.clone());
            Some(Box::new(move |g, store| {
                if na {
                    store.accumulate(a, g * &*bc);
                }
                if nb {
                    store.accumulate(b, g * &*ac);
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    /// Multiply by a fixed array (masks, code matrices); no gradient to it.
    pub fn mul_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let av = self.rc(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let out = &*av * c;
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            let cc = c.clone();
            Some(Box::new(move |g, store| store.accumulate(a, g * &cc)))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x * s);
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| store.accumulate(a, g * s)))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x + s);
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| store.accumulate(a, g.clone())))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x.max(0.0));
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            let ac = av.clone();
            Some(Box::new(move |g, store| {
                let mut dx = g.clone();
                dx.zip_mut_with(&ac, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                store.accumulate(a, dx);
            }))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.rc(a);
        let old: Vec<usize> = av.shape().to_vec();
        let out = av
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| {
                store.accumulate(a, g.to_shape(IxDyn(&old)).unwrap().to_owned());
            }))
        } else {
            None
        };
        self.push(out, na, back)
    }

    /// (B,D1) x (D1,D2) -> (B,D2)
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.rc(a), self.rc(w));
        let (a2, w2) = (as2(&av), as2(&wv));
        assert_eq!(a2.ncols(), w2.nrows(), "matmul inner dim mismatch");
        let out = a2.dot(&w2).into_dyn();
        let (na, nw) = (self.needs_grad[a], self.needs_grad[w]);
        let back: Option<BackFn> = if na || nw {
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                if na {
                    store.accumulate(a, g2.dot(&as2(&wv).t()).into_dyn());
                }
                if nw {
                    store.accumulate(w, as2(&av).t().dot(&g2).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, na || nw, back)
    }

    /// (B,D) x (K,D)^T -> (B,K); avoids materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let (a2, b2) = (as2(&av), as2(&bv));
        assert_eq!(a2.ncols(), b2.ncols(), "matmul_nt feature dim mismatch");
        let out = a2.dot(&b2.t()).into_dyn();
        let (na, nb) = (self.needs_grad[a], self.needs_grad[b]);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                if na {
                    store.accumulate(a, g2.dot(&as2(&bv)).into_dyn());
                }
                if nb {
                    store.accumulate(b, g2.t().dot(&as2(&av)).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    /// (B,D) + (D,) broadcast over rows.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b_id(bias)));
        let a2 = as2(&av);
        let b1 = bv
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d")
            .to_owned();
        assert_eq!(a2.ncols(), b1.len(), "bias width mismatch");
        let out = (&a2 + &b1).into_dyn();
        let (na, nb) = (self.needs_grad[a], self.needs_grad[bias]);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g, store| {
                if na {
                    store.accumulate(a, g.clone());
                }
                if nb {
                    store.accumulate(bias, as2(g).sum_axis(Axis(0)).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    /// Row-wise L2 normalization of (B,D); rows must be nonzero.
    pub fn l2norm_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let a2 = as2(&av);
        let norms: Array1<f64> = a2.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        assert!(
            norms.iter().all(|&n| n > 0.0),
            "l2norm_rows: zero-norm row"
        );
        let mut out = a2.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
            row.mapv_inplace(|x| x / n);
        }
        let yc = out.clone();
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for (i, ((grow, yrow), &n)) in g2
                    .rows()
                    .into_iter()
                    .zip(yc.rows())
                    .zip(norms.iter())
                    .enumerate()
                {
                    let dot = grow.dot(&yrow);
                    for j in 0..grow.len() {
                        dx[[i, j]] = (grow[j] - yrow[j] * dot) / n;
                    }
                }
                store.accumulate(a, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), na, back)
    }

    /// Row-wise softmax of (B,K), max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let a2 = as2(&av);
        let out = softmax2(&a2);
        let yc = out.clone();
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let dot: f64 = (0..g2.ncols()).map(|k| g2[[i, k]] * yc[[i, k]]).sum();
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = yc[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                store.accumulate(a, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), na, back)
    }

    /// Row-wise log-softmax of (B,K).
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let a2 = as2(&av);
        let mut out = Array2::<f64>::zeros(a2.raw_dim());
        for (mut orow, arow) in out.rows_mut().into_iter().zip(a2.rows()) {
            let m = arow.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = arow.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            for (o, &x) in orow.iter_mut().zip(arow.iter()) {
                *o = x - lse;
            }
        }
        let probs = out.mapv(f64::exp);
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let gsum: f64 = g2.row(i).sum();
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = g2[[i, j]] - probs[[i, j]] * gsum;
                    }
                }
                store.accumulate(a, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), na, back)
    }

    /// Row-wise dot product of two (B,D) arrays -> (B,).
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "rowwise_dot shape mismatch");
        let (a2, b2) = (as2(&av), as2(&bv));
        let out: Array1<f64> = a2
            .rows()
            .into_iter()
            .zip(b2.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let (na, nb) = (self.needs_grad[a], self.needs_grad[b]);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g, store| {
                let g1 = g
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("rowwise_dot grad must be 1-d");
                if na {
                    let mut da = as2(&bv);
                    for (mut row, &gi) in da.rows_mut().into_iter().zip(g1.iter()) {
                        row.mapv_inplace(|x| x * gi);
                    }
                    store.accumulate(a, da.into_dyn());
                }
                if nb {
                    let mut db = as2(&av);
                    for (mut row, &gi) in db.rows_mut().into_iter().zip(g1.iter()) {
                        row.mapv_inplace(|x| x * gi);
                    }
                    store.accumulate(b, db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), na || nb, back)
    }

    /// Concatenate two (B,Ka) and (B,Kb) arrays along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let (a2, b2) = (as2(&av), as2(&bv));
        assert_eq!(a2.nrows(), b2.nrows(), "concat_cols row mismatch");
        let ka = a2.ncols();
        let out = ndarray::concatenate(Axis(1), &[a2.view(), b2.view()])
            .expect("concat_cols")
            .into_dyn();
        let (na, nb) = (self.needs_grad[a], self.needs_grad[b]);
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                if na {
                    store.accumulate(a, g2.slice(ndarray::s![.., ..ka]).to_owned().into_dyn());
                }
                if nb {
                    store.accumulate(b, g2.slice(ndarray::s![.., ka..]).to_owned().into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    /// Extract column `j` of (B,K) -> (B,).
    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let av = self.rc(a);
        let a2 = as2(&av);
        let out = a2.column(j).to_owned().into_dyn();
        let na = self.needs_grad[a];
        let shape = (a2.nrows(), a2.ncols());
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g, store| {
                let mut dx = Array2::<f64>::zeros(shape);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                dx.column_mut(j).assign(&g1);
                store.accumulate(a, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = ndarray::arr0(av.sum()).into_dyn();
        let na = self.needs_grad[a];
        let back: Option<BackFn> = if na {
            let shape = av.raw_dim();
            Some(Box::new(move |g, store| {
                let gs = *g.first().unwrap();
                store.accumulate(a, ArrayD::from_elem(shape.clone(), gs));
            }))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Class-weighted cross-entropy from logits.
    ///
    /// loss = sum_b w[y_b] * (-log softmax(logits_b)[y_b]) / sum_b w[y_b]
    ///
    /// The weighted-mean normalization keeps the loss scale comparable when
    /// weighting is toggled; uniform weights reduce to the plain mean.
    pub fn weighted_ce(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Var {
        let lv = self.rc(logits);
        let l2 = as2(&lv);
        let b = l2.nrows();
        assert_eq!(labels.len(), b, "labels length mismatch");
        assert!(
            labels.iter().all(|&y| y < l2.ncols()),
            "label out of range"
        );
        let probs = softmax2(&l2);
        let wsum: f64 = labels.iter().map(|&y| class_weights[y]).sum();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let m = l2.row(i).fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = l2.row(i).iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            loss += class_weights[y] * (lse - l2[[i, y]]);
        }
        loss /= wsum;
        let na = self.needs_grad[logits];
        let back: Option<BackFn> = if na {
            let labels = labels.to_vec();
            let w = class_weights.to_vec();
            Some(Box::new(move |g, store| {
                let gs = *g.first().unwrap();
                let mut dx = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dx[[i, y]] -= 1.0;
                    let wi = w[y] / wsum;
                    dx.row_mut(i).mapv_inplace(|v| v * wi * gs);
                }
                store.accumulate(logits, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(ndarray::arr0(loss).into_dyn(), na, back)
    }
}

fn b_id(v: Var) -> Var {
    v
}

pub(crate) fn softmax2(a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(a.raw_dim());
    for (mut orow, arow) in out.rows_mut().into_iter().zip(a.rows()) {
        let m = arow.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(arow.iter()) {
            *o = (x - m).exp();
            sum += *o;
        }
        orow.mapv_inplace(|x| x / sum);
    }
    out
}
