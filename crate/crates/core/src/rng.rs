//! Seeded randomness. Everything in the crate that needs random numbers goes
//! through ChaCha so identical seeds give bit-identical results everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor4;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1).
pub fn rng_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut rng = seeded(seed);
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4 { n, c, h, w, data }
}

/// Uniform values in [lo, hi).
pub fn rng_tensor_range(n: usize, c: usize, h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Tensor4 {
    let mut rng = seeded(seed);
    let data = (0..n * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4 { n, c, h, w, data }
}
