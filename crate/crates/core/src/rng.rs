//! Deterministic seeded random streams.
//!
//! Every stochastic choice in the laboratory draws from a `Stream` derived
//! from a run seed plus a purpose label, so runs are reproducible and
//! independent concerns never share generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A deterministic random stream.
pub type Stream = ChaCha8Rng;

/// Mixes a seed and label into a well-spread 64-bit state (splitmix64).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from a run seed and a purpose label.
pub fn derive(seed: u64, label: &str) -> Stream {
    let mut h = mix(seed);
    for b in label.bytes() {
        h = mix(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Derives a per-index substream (e.g. one per epoch or per example).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> Stream {
    let mut h = mix(seed);
    for b in label.bytes() {
        h = mix(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(mix(h ^ index))
}
