//! Parameter initializers.

use super::{Real, Rng, Tensor};

/// Truncated normal (±2σ), used for linear and attention weights.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.trunc_normal(std)))
}

/// Kaiming-uniform with fan-in scaling: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform_in(-bound, bound)))
}
