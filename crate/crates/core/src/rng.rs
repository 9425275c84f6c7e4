//! Counter-based RNG substreams derived from one master seed.
//!
//! Every random decision in a run is drawn from a ChaCha8 stream addressed by
//! `(purpose, a, b)`, e.g. `(Augmentation, step, example_index)`. Streams are
//! independent of each other and of the order in which they are requested, so
//! enabling mixup never shifts the Poisson sampling or the noise draws, and
//! parallel workers see the same numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init = 1,
    Sampling = 2,
    Augmentation = 3,
    Noise = 4,
    Eval = 5,
    Data = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    key: [u8; 32],
    master: u64,
}

impl SeedStreams {
    pub fn new(master_seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = master_seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        SeedStreams { key, master: master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master
    }

    /// The stream for `(purpose, a, b)`, positioned at its start.
    pub fn rng(&self, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(stream_id(purpose, a, b));
        rng
    }
}

fn stream_id(purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(purpose as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
