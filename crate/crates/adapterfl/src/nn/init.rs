//! Seeded weight initialization. All draws go through f64 so that f32 and
//! f64 builds of the same seed see the same underlying sample stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

/// Kaiming-uniform: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn kaiming_uniform<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Bias init: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn bias_uniform<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

fn uniform<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}
