//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! master seed and a fixed purpose label, so e.g. adding evaluation episodes
//! never shifts the training trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rollout,
    Evaluation,
    Environment,
    Verify,
}

impl Stream {
    fn label(self) -> u64 {
        match self {
            Stream::Rollout => 0x726f_6c6c_6f75_7400,
            Stream::Evaluation => 0x6576_616c_7561_7400,
            Stream::Environment => 0x656e_7669_726f_6e00,
            Stream::Verify => 0x7665_7269_6679_0000,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ stream.label()));
    rng.set_stream(index);
    rng
}
