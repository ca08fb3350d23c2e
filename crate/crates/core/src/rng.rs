//! Seeded random streams.
//!
//! One 64-bit run seed is split into independent named streams (data order,
//! initialization, augmentation, ...) with a splitmix64 mix, so each consumer
//! is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child seed for the consumer `name`.
    pub fn derive(&self, name: &str, index: u64) -> u64 {
        let mut state = self.seed ^ fnv1a(name);
        let a = splitmix64(&mut state);
        let mut state = a ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
        splitmix64(&mut state)
    }

    pub fn rng(&self, name: &str) -> Rng {
        self.rng_indexed(name, 0)
    }

    pub fn rng_indexed(&self, name: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.derive(name, index))
    }
}
