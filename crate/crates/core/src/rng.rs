//! Seed derivation for independent, order-stable random streams.
//!
//! Every rollout lane draws from its own ChaCha stream keyed by a tuple such
//! as `(seed, iteration, query, phase, turn, member)`, so results never depend
//! on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LaneRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a derivation path into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn lane_rng(seed: u64, path: &[u64]) -> LaneRng {
    LaneRng::seed_from_u64(derive_seed(seed, path))
}

/// A position in the seed derivation tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lane {
    seed: u64,
    path: Vec<u64>,
}

impl Lane {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        Lane { seed, path: path.to_vec() }
    }

    pub fn child(&self, key: u64) -> Lane {
        let mut path = self.path.clone();
        path.push(key);
        Lane { seed: self.seed, path }
    }

    pub fn rng(&self) -> LaneRng {
        lane_rng(self.seed, &self.path)
    }
}

/// Stable 64-bit key for a string identifier (FNV-1a).
pub fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
