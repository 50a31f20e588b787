//! Parameter initializers and seeded random tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::diffcore::tensor::Tensor;
use crate::scalar::Scalar;

pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new(lo, hi).expect("valid uniform range");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// He-normal initialization for a layer followed by a ReLU.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
