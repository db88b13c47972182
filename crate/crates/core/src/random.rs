//! Seeded random tensors. Every random quantity in the crate comes from a
//! ChaCha8 stream so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite uniform samples")
}

/// Uniform `[-1, 1)` tensor from a fresh stream seeded with `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    uniform_tensor(shape, -1.0, 1.0, &mut seeded(seed))
}
