//! Seed derivation. Every random stream in the simulator is keyed by a base
//! seed plus a short tag path so streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix(base.wrapping_add(GOLDEN)), |acc, &t| {
            mix(acc ^ mix(t.wrapping_add(GOLDEN)))
        })
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags used across modules.
pub(crate) mod tag {
    pub const SCENE: u64 = 1;
    pub const CORRUPTION: u64 = 2;
    pub const ORACLE: u64 = 3;
    pub const HOTSPOT: u64 = 4;
    pub const SELECTION: u64 = 5;
    pub const LOSS: u64 = 6;
    pub const TRAINING: u64 = 7;
}
