//! Deterministic seed streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream from a base seed and a list of tags
/// (sample id, restart index, ...). SplitMix64 finalizer per tag.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = mix(h ^ mix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
