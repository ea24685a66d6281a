use crate::real::Real;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Truncated-free normal init scaled like Xavier/Glorot for projections.
/// Draw order is fixed (row-major) so identical seeds give identical tensors.
pub fn xavier<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(rng, rows, cols, std)
}

pub fn normal<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0f64, std).expect("std is finite");
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        *v = F::from_f64(dist.sample(rng));
    }
    out
}

pub fn normal_vec<F: Real>(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<F> {
    let dist = Normal::new(0.0f64, std).expect("std is finite");
    let mut out = Array1::zeros(len);
    for v in out.iter_mut() {
        *v = F::from_f64(dist.sample(rng));
    }
    out
}

pub fn zeros1<F: Real>(len: usize) -> Array1<F> {
    Array1::zeros(len)
}

pub fn ones1<F: Real>(len: usize) -> Array1<F> {
    Array1::from_elem(len, F::one())
}

/// Uniform [-bound, bound], used for embedding tables.
pub fn uniform<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<F> {
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        *v = F::from_f64(rng.gen_range(-bound..bound));
    }
    out
}
