//! Seeded random streams.
//!
//! All randomness in a run derives from one master seed. Each consumer asks for a
//! named sub-stream (`"data"`, `"init"`, `"generator"`, `"mix-weights"`, ...) so that
//! changing how much one consumer draws never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        StreamRng::seed_from_u64(self.derive(name, 0))
    }

    /// Sub-stream `index` of `name`, e.g. one per mini-batch.
    pub fn indexed(&self, name: &str, index: u64) -> StreamRng {
        StreamRng::seed_from_u64(self.derive(name, index.wrapping_add(1)))
    }

    fn derive(&self, name: &str, index: u64) -> u64 {
        // FNV-1a over the name, then splitmix64 finalization of the mixed words.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        splitmix64(splitmix64(self.seed ^ h) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
