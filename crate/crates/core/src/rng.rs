//! Reproducible random streams.
//!
//! A [`RngSeed`] names one ChaCha8 stream: the key is derived from `master`
//! and the 64-bit ChaCha stream id is `stream`. Child seeds for nested work
//! (replication, then particle) come from [`RngSeed::derive`], so every draw
//! is a function of its position in the experiment, never of thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub master: u64,
    pub stream: u64,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngSeed {
    pub const fn new(master: u64, stream: u64) -> Self {
        Self { master, stream }
    }

    /// Seed for the `index`-th child of this stream.
    pub fn derive(self, index: u64) -> Self {
        let master = splitmix64(self.master ^ splitmix64(self.stream ^ 0xa076_1d64_78bd_642f));
        Self {
            master,
            stream: index,
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.master;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }
}

impl From<u64> for RngSeed {
    fn from(master: u64) -> Self {
        Self::new(master, 0)
    }
}
