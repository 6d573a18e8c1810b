//! Layer building blocks and the per-step forward context.

use super::{Tape, Var};
use crate::state::ModelState;
use ndarray::{Array1, Array4, ArrayD, Ix1};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Momentum for running-statistic updates in batch norm.
const RUNNING_MOMENTUM: f64 = 0.1;

/// Per-step forward context: binds parameters from a [`ModelState`] onto a
/// tape and collects pending buffer updates (running statistics) that the
/// trainer commits after the step.
///
/// With `gradient = false` every parameter binds as a constant, which is how
/// target/key encoders are run: no backward closure ever references them.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub state: &'a ModelState,
    pub training: bool,
    gradient: bool,
    bound: BTreeMap<String, Var>,
    pub buffer_updates: Vec<(String, ArrayD<f64>)>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, state: &'a ModelState, training: bool) -> Self {
        Self {
            tape,
            state,
            training,
            gradient: true,
            bound: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Forward pass whose parameters are all constants (stop-gradient).
    pub fn frozen(tape: &'a mut Tape, state: &'a ModelState, training: bool) -> Self {
        Self {
            gradient: false,
            ..Self::new(tape, state, training)
        }
    }

    /// Bind a parameter by name (lazily; repeated lookups reuse the node).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .state
            .param(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let trainable = self.gradient && !self.state.is_frozen(name);
        let v = if trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn buffer1(&self, name: &str) -> Array1<f64> {
        self.state
            .buffer(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned()
    }

    pub fn record_buffer(&mut self, name: &str, value: ArrayD<f64>) {
        self.buffer_updates.push((name.to_string(), value));
    }

    /// Parameter bindings, for gradient harvesting after backward.
    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Commit pending buffer updates into a state (the same one that was
    /// forwarded, after the tape has been dropped).
    pub fn commit_buffers(updates: Vec<(String, ArrayD<f64>)>, state: &mut ModelState) {
        for (name, value) in updates {
            state.set_buffer(&name, value);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            k,
            stride,
            pad: k / 2,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn init(&self, state: &mut ModelState, rng: &mut ChaCha8Rng) {
        state.insert_param(
            format!("{}.weight", self.name),
            super::init::conv_weight(rng, self.out_ch, self.in_ch, self.k),
        );
        if self.bias {
            state.insert_param(
                format!("{}.bias", self.name),
                super::init::zeros(&[self.out_ch]),
            );
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        let y = f.tape.conv2d(x, w, self.stride, self.pad);
        if self.bias {
            let b = f.param(&format!("{}.bias", self.name));
            f.tape.add_bias_channel(y, b)
        } else {
            y
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub ch: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        Self { name: name.into(), ch }
    }

    pub fn init(&self, state: &mut ModelState) {
        state.insert_param(format!("{}.gamma", self.name), super::init::ones(&[self.ch]));
        state.insert_param(format!("{}.beta", self.name), super::init::zeros(&[self.ch]));
        state.insert_buffer(
            format!("{}.running_mean", self.name),
            super::init::zeros(&[self.ch]),
        );
        state.insert_buffer(
            format!("{}.running_var", self.name),
            super::init::ones(&[self.ch]),
        );
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, mask: Option<&Array4<f64>>) -> Var {
        let gamma = f.param(&format!("{}.gamma", self.name));
        let beta = f.param(&format!("{}.beta", self.name));
        if f.training {
            let has_valid = mask.map_or(true, |m| m.sum() > 0.0);
            let (y, mean, var) = f.tape.batchnorm2d_train(x, gamma, beta, mask);
            if has_valid {
                let rm = f.buffer1(&format!("{}.running_mean", self.name));
                let rv = f.buffer1(&format!("{}.running_var", self.name));
                let new_rm = &rm * (1.0 - RUNNING_MOMENTUM) + &mean * RUNNING_MOMENTUM;
                let new_rv = &rv * (1.0 - RUNNING_MOMENTUM) + &var * RUNNING_MOMENTUM;
                f.record_buffer(&format!("{}.running_mean", self.name), new_rm.into_dyn());
                f.record_buffer(&format!("{}.running_var", self.name), new_rv.into_dyn());
            }
            y
        } else {
            let rm = f.buffer1(&format!("{}.running_mean", self.name));
            let rv = f.buffer1(&format!("{}.running_var", self.name));
            f.tape.batchnorm2d_eval(x, gamma, beta, &rm, &rv)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { name: name.into(), d_in, d_out }
    }

    pub fn init(&self, state: &mut ModelState, rng: &mut ChaCha8Rng) {
        state.insert_param(
            format!("{}.weight", self.name),
            super::init::linear_weight(rng, self.d_in, self.d_out),
        );
        state.insert_param(format!("{}.bias", self.name), super::init::zeros(&[self.d_out]));
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        let b = f.param(&format!("{}.bias", self.name));
        let y = f.tape.matmul(x, w);
        f.tape.add_bias_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub name: String,
    pub d: usize,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        Self { name: name.into(), d }
    }

    pub fn init(&self, state: &mut ModelState) {
        state.insert_param(format!("{}.gamma", self.name), super::init::ones(&[self.d]));
        state.insert_param(format!("{}.beta", self.name), super::init::zeros(&[self.d]));
        state.insert_buffer(
            format!("{}.running_mean", self.name),
            super::init::zeros(&[self.d]),
        );
        state.insert_buffer(
            format!("{}.running_var", self.name),
            super::init::ones(&[self.d]),
        );
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let gamma = f.param(&format!("{}.gamma", self.name));
        let beta = f.param(&format!("{}.beta", self.name));
        if f.training {
            let (y, mean, var) = f.tape.batchnorm1d_train(x, gamma, beta);
            let rm = f.buffer1(&format!("{}.running_mean", self.name));
            let rv = f.buffer1(&format!("{}.running_var", self.name));
            let new_rm = &rm * (1.0 - RUNNING_MOMENTUM) + &mean * RUNNING_MOMENTUM;
            let new_rv = &rv * (1.0 - RUNNING_MOMENTUM) + &var * RUNNING_MOMENTUM;
            f.record_buffer(&format!("{}.running_mean", self.name), new_rm.into_dyn());
            f.record_buffer(&format!("{}.running_var", self.name), new_rv.into_dyn());
            y
        } else {
            let rm = f.buffer1(&format!("{}.running_mean", self.name));
            let rv = f.buffer1(&format!("{}.running_var", self.name));
            f.tape.batchnorm1d_eval(x, gamma, beta, &rm, &rv)
        }
    }
}

/// Harvest named gradients for one state after a backward pass.
pub fn collect_grads(
    fwd_bindings: &BTreeMap<String, Var>,
    grads: &mut super::GradStore,
) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    for (name, &var) in fwd_bindings {
        if let Some(g) = grads.take(var) {
            out.insert(name.clone(), g);
        }
    }
    out
}
