//! Seeded, counter-based random streams.
//!
//! Every consumer derives its generator from a 64-bit seed plus a purpose
//! code, so streams never overlap and any record can be regenerated alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Distinct values give independent ChaCha streams.
pub mod purpose {
    pub const SCENE: u64 = 1;
    pub const TASK: u64 = 2;
    pub const QA: u64 = 3;
    pub const DISPREF: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const EVAL: u64 = 8;
}

pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Mixes a base seed with an index (splitmix64 finalizer). Used where two
/// seeds must stay independent even when their sums would collide.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
