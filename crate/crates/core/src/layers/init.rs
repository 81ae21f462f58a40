//! Weight initializers.

use nalgebra::DMatrix;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Real, Tensor};

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)))
}

/// `[rows × cols]` matrix with orthonormal columns (rows ≥ cols) or rows,
/// from the QR factorization of a Gaussian matrix.
pub fn orthogonal<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    // fix the sign ambiguity so the distribution is uniform
    let rdiag = qr.r().diagonal();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Tensor::from_fn(&[rows, cols], |i| {
        let (row, col) = (i / cols, i % cols);
        T::lit(if tall { q[(row, col)] } else { q[(col, row)] })
    })
}
