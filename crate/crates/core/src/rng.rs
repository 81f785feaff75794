//! Deterministic RNG streams.
//!
//! Every random decision in the pipeline draws from a ChaCha8 generator
//! seeded by `(master seed, stream label, step)`. Streams never share
//! state, so checkpoints only need to record the master seed and the step
//! counter to reproduce the exact remaining sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a. `std` hashers are not guaranteed stable across
/// releases; reproducibility of seeded runs depends on this staying fixed.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent RNG for `(seed, stream, step)`.
pub fn stream_rng(master_seed: u64, stream: &str, step: u64) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(stream.len() + 16);
    key.extend_from_slice(&master_seed.to_le_bytes());
    key.extend_from_slice(stream.as_bytes());
    key.extend_from_slice(&step.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_independent() {
        let mut a = stream_rng(7, "data", 3);
        let mut b = stream_rng(7, "data", 3);
        let mut c = stream_rng(7, "patch", 3);
        let xs: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..4).map(|_| c.random()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn fnv1a_is_pinned() {
        // Reference value for the empty input from the FNV spec.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
