//! Seeded weight-initialization and sampling helpers. All randomness in
//! the toolkit flows through ChaCha so runs replay bit-for-bit.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Standard-normal sample via Box-Muller.
pub fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = loop {
        let v = rng.random::<f64>();
        if v > 1e-300 {
            break v;
        }
    };
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Array of N(0, std^2) samples.
pub fn normal_array(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal(rng) * std)
}

/// Kaiming-style init for a layer with the given fan-in.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    normal_array(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Uniform sample in [lo, hi).
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
