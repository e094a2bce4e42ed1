//! Named, independent random streams derived from one master seed.
//!
//! Every stochastic component (data generation, each detector's init, each
//! oracle's noise, ablation resampling) draws from its own stream, so
//! toggling one component never shifts the draws of another. Stream seeds
//! are derived with a fixed FNV-1a / splitmix64 scheme and do not depend on
//! platform hashers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A point in the seed tree. `child` descends by name, `rng` materializes
/// the stream at the current point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(master_seed: u64) -> Self {
        Self { state: fnv1a(FNV_OFFSET, &master_seed.to_le_bytes()) }
    }

    pub fn child(&self, name: &str) -> Self {
        Self { state: fnv1a(self.state, name.as_bytes()) }
    }

    pub fn child_index(&self, index: u64) -> Self {
        Self { state: fnv1a(self.state, &index.to_le_bytes()) }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(splitmix64(self.state))
    }
}
