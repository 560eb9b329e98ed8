use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Normal weights with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
