//! Deterministic seed derivation.
//!
//! Every random draw in training and evaluation is keyed by a base seed plus
//! a small tuple of coordinates (epoch, image index, ...), so runs can resume
//! at any epoch without carrying generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &s in stream {
        h = mix(h ^ mix(s.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    mix(h)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
