//! Self-supervised pretraining and severity-classification benchmark harness
//! for colonoscopy image scoring on the Mayo Endoscopic Score (MES) scale.
//!
//! The crate pretrains convolutional encoders with four label-free methods
//! (BYOL, MoCo, SwAV, SparK), fine-tunes them for 4-class MES classification,
//! and benchmarks them against supervised baselines under a fixed splitting,
//! subsampling, class-weighting, and macro-metric protocol.
//!
//! Everything is driven by an [`config::ExperimentConfig`] document and is
//! deterministic given a seed. The numeric core is a small reverse-mode
//! autodiff tape over dense `f64` arrays ([`nn`]), which keeps gradient
//! checks tight and CPU runs bit-reproducible.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `mayossl` binary for the command-line surface.

pub mod augment;
pub mod backbone;
pub mod data;
pub mod weights;
pub mod error;
pub mod nn;
pub mod pretext;
pub mod rng;
pub mod state;

pub use error::{Error, Result};
