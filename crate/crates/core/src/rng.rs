//! Seeded random sources. Every random draw in the crate goes through a
//! ChaCha8 stream so results are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor4;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a parent seed and a label.
pub fn derive(seed: u64, label: &str) -> Rng64 {
    // FNV-1a over the label, mixed into the seed
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn uniform_tensor(rng: &mut impl Rng, dims: [usize; 4], lo: f32, hi: f32) -> Tensor4 {
    let [n, c, h, w] = dims;
    Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(lo..hi))
}
