//! Seed derivation. Every stochastic routine takes an explicit `u64` seed and
//! builds its own generator, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for task `index` of purpose `domain` under `base`.
pub fn derive_seed(base: u64, domain: u64, index: u64) -> u64 {
    mix(mix(base ^ mix(domain)).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) mod domain {
    pub const JUMPERS: u64 = 1;
    pub const DRAW: u64 = 2;
    pub const GROSS: u64 = 3;
    pub const GENBOOT: u64 = 4;
    pub const OUTLIERS: u64 = 5;
}
