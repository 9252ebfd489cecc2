//! He (Kaiming) initialization for rectifier networks.
//!
//! A layer computes `y = W x + b`, where `x` gathers `k^r · c` inputs
//! (`k^r` kernel taps over `c` input channels) and `W` has one row per
//! filter. Keeping `½ · n · Var[w] = 1` with `n = k^r · c` preserves the
//! forward signal variance through ReLU layers, so weights are drawn from
//! `N(0, 2/n)` and biases start at zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{NnError, Result};

/// Standard deviation `sqrt(2 / fan_in)` of the He-normal distribution.
pub fn he_std(fan_in: usize) -> Result<f64> {
    if fan_in < 1 {
        return Err(NnError::Parameter("fan-in must be at least 1".into()));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Draws `count` zero-mean Gaussian weights with He standard deviation.
///
/// Panics if `fan_in == 0`.
pub fn he_normal<R: Rng + ?Sized>(fan_in: usize, count: usize, rng: &mut R) -> Vec<f32> {
    let std = he_std(fan_in).expect("fan-in must be positive");
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..count).map(|_| normal.sample(rng) as f32).collect()
}
