//! Differentiable computation substrate: a reverse-mode autodiff tape over
//! dense `f64` arrays, plus the layers, normalization, initializers, and
//! optimizer built on top of it.
//!
//! The tape is rebuilt every training step. Operations append nodes; each
//! node stores its value and, when any input requires gradients, a backward
//! closure. Constants (frozen parameters, stop-gradient branches, data)
//! never allocate backward closures, so gradient isolation for target/key
//! encoders and clustering codes holds structurally rather than by masking.

pub mod conv;
pub mod init;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod optim;

pub use layers::Fwd;

use ndarray::{ArrayD, IxDyn};
use std::rc::Rc;

/// Handle to a node on the tape.
pub type Var = usize;

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradStore)>;

/// Gradient accumulator indexed by tape node.
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn accumulate(&mut self, v: Var, g: ArrayD<f64>) {
        match &mut self.grads[v] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v].take()
    }
}

/// Reverse-mode tape. One per training step; nodes are appended in
/// topological order, so a single reverse sweep backpropagates.
#[derive(Default)]
pub struct Tape {
    values: Vec<Rc<ArrayD<f64>>>,
    needs_grad: Vec<bool>,
    backs: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Node that never receives gradients (data, frozen parameters,
    /// stop-gradient values).
    pub fn constant(&mut self, a: ArrayD<f64>) -> Var {
        self.push(a, false, None)
    }

    /// Trainable leaf; its gradient is retained by [`Tape::backward`].
    pub fn leaf(&mut self, a: ArrayD<f64>) -> Var {
        self.push(a, true, None)
    }

    /// Re-enter a value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.value(v).clone();
        self.constant(val)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        *self.values[v].first().expect("scalar var is empty")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs_grad[v]
    }

    pub(crate) fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.values[v])
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        needs_grad: bool,
        back: Option<BackFn>,
    ) -> Var {
        self.values.push(Rc::new(value));
        self.needs_grad.push(needs_grad);
        self.backs.push(back);
        self.values.len() - 1
    }

    /// Backpropagate from `root` (typically a 0-d loss). Returns gradients;
    /// leaf gradients stay retrievable, interior gradients are freed as the
    /// sweep passes them.
    pub fn backward(&self, root: Var) -> GradStore {
        let mut store = GradStore {
            grads: vec![None; self.values.len()],
        };
        store.grads[root] = Some(ArrayD::ones(IxDyn(self.values[root].shape())));
        for i in (0..=root).rev() {
            if self.backs[i].is_none() {
                continue; // leaf or constant: keep any accumulated gradient
            }
            let Some(g) = store.grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.backs[i] {
                back(&g, &mut store);
            }
        }
        store
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-finite-difference gradient checking used by op tests and the
    //! acceptance suite's loss-oracle checks.

    use super::{Tape, Var};
    use ndarray::ArrayD;

    /// Max relative error between the analytic gradient of `f` (a scalar
    /// function of one leaf input) and central finite differences.
    pub fn max_rel_err(
        input: &ArrayD<f64>,
        f: &dyn Fn(&mut Tape, Var) -> Var,
    ) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = f(&mut tape, x);
        assert_eq!(tape.value(loss).len(), 1, "gradcheck target must be scalar");
        let grads = tape.backward(loss);
        let analytic = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));

        let mut worst = 0.0f64;
        let n = input.len();
        for i in 0..n {
            let h = 1e-6 * (1.0 + input.as_slice().unwrap()[i].abs());
            let eval = |delta: f64| {
                let mut pert = input.clone();
                pert.as_slice_mut().unwrap()[i] += delta;
                let mut t = Tape::new();
                let v = t.leaf(pert);
                let l = f(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((an - fd).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn backward_through_shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[3.0]).into_dyn());
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[2.0]).into_dyn());
        let c = t.constant(arr1(&[5.0]).into_dyn());
        let y = t.mul(x, c);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap()[[0]], 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[2.0]).into_dyn());
        let d = t.detach(x);
        let y = t.mul(x, d);
        let s = t.sum_all(y);
        let g = t.backward(s);
        // d(x * stopgrad(x))/dx = stopgrad(x) = 2
        assert_eq!(g.get(x).unwrap()[[0]], 2.0);
    }

    #[test]
    fn matmul_gradcheck() {
        let x = arr2(&[[0.3, -1.2, 0.7], [1.1, 0.4, -0.6]]).into_dyn();
        let err = gradcheck::max_rel_err(&x, &|t, v| {
            let w = t.leaf(arr2(&[[0.2, -0.5], [1.0, 0.3], [-0.7, 0.9]]).into_dyn());
            let y = t.matmul(v, w);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(err < 1e-6, "matmul grad err {err}");
    }
}
