//! Seedable, splittable randomness.
//!
//! Every stochastic choice in a session draws from a stream derived from the
//! session seed plus a (name, index) path, so any single draw can be replayed
//! without replaying the draws that came before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Mixes a seed with an index into an independent-looking child seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// A named position in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRng {
    seed: u64,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, name: &str, index: u64) -> SplitRng {
        SplitRng {
            seed: mix_seed(mix_seed(self.seed, fnv1a(name)), index),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// A `ChaCha8Rng` seeded directly from `seed`.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
