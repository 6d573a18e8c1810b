//! Parameter initializers (He-style fan-in scaling).

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal via Box-Muller; keeps us off rand_distr for one function.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-normal conv weight (O,C,k,k): std = sqrt(2 / (C*k*k)).
pub fn conv_weight(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize) -> ArrayD<f64> {
    let std = (2.0 / (c * k * k) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[o, c, k, k]), |_| normal(rng) * std)
}

/// He-normal linear weight (D_in, D_out): std = sqrt(2 / D_in).
pub fn linear_weight(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> ArrayD<f64> {
    let std = (2.0 / d_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[d_in, d_out]), |_| normal(rng) * std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// Small-scale normal vector, used for mask embeddings.
pub fn small_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal(rng) * std)
}

/// Random matrix with unit-norm rows, used for prototype banks.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let mut a = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| normal(rng));
    for mut row in a
        .view_mut()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .rows_mut()
    {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    a
}
