//! Seeded randomness. Every random decision in the crate flows from one
//! master seed through named sub-streams, so runs are reproducible and the
//! streams do not interfere with each other.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Named sub-stream of the master seed ("init", "masking", "shuffling", ...).
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Truncated normal: resample anything beyond two standard deviations.
/// Matches the usual Transformer initialization convention.
pub fn truncated_normal<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let normal = Normal::new(0.0f64, std).unwrap();
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(S::from_f64_lossy(v));
        }
    }
    Tensor::new(shape, data)
}

/// Uniform starting tensor for tests that need arbitrary finite values.
pub fn uniform<S: Scalar>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data)
}
