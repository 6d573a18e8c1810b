//! Deterministic seed derivation.
//!
//! All stochastic behaviour in the crate draws from a ChaCha stream seeded by
//! hashing a base seed together with a purpose label and integer coordinates
//! (record index, epoch, step, ...). Derived generators are independent of
//! call order, so parallel workers and resumed runs reproduce the same draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; mixes a word into an accumulator.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed, a purpose label, and coordinates.
pub fn derive(base: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x5851_f42d_4c95_7f2d);
    for b in label.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    for &c in coords {
        h = mix(h ^ c);
    }
    h
}

/// ChaCha generator for a derived stream.
pub fn rng(base: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, label, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        let a = derive(7, "split", &[0, 1]);
        let b = derive(7, "split", &[0, 1]);
        assert_eq!(a, b);
        assert_ne!(a, derive(7, "split", &[1, 0]));
        assert_ne!(a, derive(7, "order", &[0, 1]));
        assert_ne!(a, derive(8, "split", &[0, 1]));
    }

    #[test]
    fn derived_rngs_are_reproducible() {
        let mut r1 = rng(3, "aug", &[42]);
        let mut r2 = rng(3, "aug", &[42]);
        for _ in 0..16 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }
}
