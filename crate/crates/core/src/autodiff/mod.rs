//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations record themselves on a [`Tape`] and return a [`Var`] handle.
//! Calling [`Tape::backward`] on a scalar fills the gradient slots of every
//! requires-grad leaf that the scalar depends on.

mod gemm;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// He-style weight matrix `[fan_in, fan_out]` with std `sqrt(2 / fan_in)`.
pub fn he_weight(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::new([fan_in, fan_out], data).expect("consistent shape")
}

/// Uniform values in `[lo, hi)`, mostly for tests and toy problems.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

#[cfg(test)]
mod tests;
