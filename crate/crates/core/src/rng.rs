//! Counter-based RNG streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded by
//! mixing a master seed with a small tuple of counters (sample id, scale
//! index, ...). Results therefore depend only on those counters and not on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a list of counters.
pub fn stream(seed: u64, counters: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Tensor of i.i.d. standard normals.
pub fn normal_tensor<R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
