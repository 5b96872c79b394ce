//! Seed derivation. Every random stream in a run is keyed by the run seed
//! plus a path of integer tags, so the draw for a given sample never depends
//! on the order in which samples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Named stream tags.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const PRIMARY_SHUFFLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SUPPORT: u64 = 4;
    pub const EVOLVE: u64 = 5;
    pub const E2L_INIT: u64 = 6;
    pub const E2L_TRAIN: u64 = 7;
    pub const GOLD_NOISE: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const SYNTH: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = rng_for(7, &[1, 2]).random();
        let b: u64 = rng_for(7, &[1, 2]).random();
        let c: u64 = rng_for(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
