//! Weight initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::Element;

/// He/Kaiming normal initialization for ReLU-family layers.
pub fn kaiming_normal<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(shape, std, rng)
}

pub fn normal<T: Element, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(dist.sample(rng)))
}

/// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(dist.sample(rng)))
}
