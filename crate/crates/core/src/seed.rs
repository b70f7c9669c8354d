//! Seed derivation. Every random draw in the crate flows from one user seed
//! mixed with stage-specific salts, so runs are reproducible end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with an ordered list of salts.
pub fn derive(base: u64, salts: &[u64]) -> u64 {
    salts
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn rng(base: u64, salts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(base, salts))
}

// Stage salts.
pub(crate) const STREAM: u64 = 0x5354_5245_414d;
pub(crate) const MASKING: u64 = 0x4d41_534b;
pub(crate) const INIT: u64 = 0x494e_4954;
pub(crate) const DROPOUT: u64 = 0x4452_4f50;
pub(crate) const SHUFFLE: u64 = 0x5348_5546;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn salts_change_the_seed() {
        assert_ne!(derive(1, &[1]), derive(1, &[2]));
        assert_ne!(derive(1, &[1, 2]), derive(1, &[2, 1]));
        assert_eq!(derive(7, &[3, 4]), derive(7, &[3, 4]));
    }
}
