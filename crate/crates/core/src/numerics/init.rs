//! Parameter initialisers. All randomness comes from a caller-owned seeded
//! generator so that identical seeds give bit-identical parameters.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Uniform on `(-bound, bound)`; used for recurrent and dense weights.
pub fn uniform(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_normal(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}
