//! Seeded, splittable random number generation.
//!
//! Every stochastic routine takes a `u64` seed. Child seeds for independent
//! streams (participants, agents, runs) are derived with a SplitMix64 mix of
//! the parent seed and a stream index, so parallel work never shares state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier written next to every serialized seed.
pub const RNG_ALGORITHM: &str = "chacha8+splitmix64";

pub type Rng = ChaCha8Rng;

/// Generator for a given seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream of `parent`.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
