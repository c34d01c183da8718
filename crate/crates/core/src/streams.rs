//! Counter-based seed derivation.
//!
//! Every random draw in a simulation is addressed by a path such as
//! `(master, sweep point, round, stream)`. The path is hashed to a 64-bit
//! seed which keys a fresh ChaCha8 generator, so results do not depend on
//! scheduling and two schemes that address the same path see the same
//! numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent purposes that consume randomness inside a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Label,
    Views,
    Fades,
    Interference,
    Pn,
    Selection,
    Guess,
    Calibration,
    Noise,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Label => 0x4c41_4245_4c00_0001,
            Stream::Views => 0x5649_4557_5300_0002,
            Stream::Fades => 0x4641_4445_5300_0003,
            Stream::Interference => 0x494e_5446_0000_0004,
            Stream::Pn => 0x504e_0000_0000_0005,
            Stream::Selection => 0x5345_4c00_0000_0006,
            Stream::Guess => 0x4755_4553_5300_0007,
            Stream::Calibration => 0x4341_4c49_4200_0008,
            Stream::Noise => 0x4e4f_4953_4500_0009,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed path into a single seed.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &x| splitmix(acc ^ splitmix(x)))
}

/// Seed of round `round` at sweep point `point`.
pub fn round_seed(master: u64, point: u64, round: u64) -> u64 {
    derive(master, &[point, round])
}

/// Generator for one purpose within a round.
pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    SimRng::seed_from_u64(derive(seed, &[stream.tag()]))
}

/// Generator for the `index`-th sub-stream of a purpose within a round.
pub fn sub_stream_rng(seed: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive(seed, &[stream.tag(), index]))
}
