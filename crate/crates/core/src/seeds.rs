//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a `u64` produced here, so results do not depend on platform
//! or on the order in which independent streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `(parent, index)`.
pub fn mix(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Derives a child seed from a parent seed and a string label.
pub fn mix_label(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(parent, h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_differ() {
        assert_ne!(mix(1, 0), mix(1, 1));
        assert_ne!(mix(1, 0), mix(2, 0));
        assert_ne!(mix_label(1, "a"), mix_label(1, "b"));
        assert_eq!(mix_label(9, "trunk"), mix_label(9, "trunk"));
    }
}
