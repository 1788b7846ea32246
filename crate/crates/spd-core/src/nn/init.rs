//! Weight initializers. All sampling goes through the caller's RNG so the
//! full parameter set is reproducible from one seed.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal initialization for a convolution kernel `(out, in, kh, kw)`:
/// std = sqrt(2 / fan_in).
pub fn he_conv<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Array4<f64> {
    let fan_in = (in_c * kh * kw) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    Array4::from_shape_simple_fn((out_c, in_c, kh, kw), || dist.sample(rng))
}

/// All-zero kernel, used for logit-producing head convolutions so a freshly
/// built model predicts the uniform distribution.
pub fn zero_conv(out_c: usize, in_c: usize, kh: usize, kw: usize) -> Array4<f64> {
    Array4::zeros((out_c, in_c, kh, kw))
}

pub fn zero_bias(out_c: usize) -> Array1<f64> {
    Array1::zeros(out_c)
}
