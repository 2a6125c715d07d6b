//! Seed derivation. Every random consumer draws from its own named stream so
//! that, for instance, training-time and evaluation-time perturbations never
//! share randomness.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Data,
    Init,
    Shuffle,
    TrainPerturb,
    EvalPerturb,
    EvalGaussian,
    RandomLabel,
    Attack,
    Relearn,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Shuffle => 3,
            Stream::TrainPerturb => 4,
            Stream::EvalPerturb => 5,
            Stream::EvalGaussian => 6,
            Stream::RandomLabel => 7,
            Stream::Attack => 8,
            Stream::Relearn => 9,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed, a stream and up to two counters (epoch, sample index, ...).
pub fn derive(base: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ stream.id().wrapping_mul(0xa076_1d64_78bd_642f));
    h = splitmix64(h ^ a.wrapping_mul(0xe703_7ed1_a0b4_28db));
    splitmix64(h ^ b.wrapping_mul(0x8ebc_6af0_9c88_c6e3))
}
