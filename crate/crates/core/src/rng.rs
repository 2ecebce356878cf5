//! Seeded random streams.
//!
//! Every random draw in training is taken from a stream derived from the run
//! seed and a small key (purpose, step, sample slot), so streams are
//! independent of scheduling and a resumed run sees the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purposes for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Mask = 3,
    DropoutSupervised = 4,
    DropoutMasked = 5,
    Split = 6,
    Synth = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: Purpose, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6D61_6C69_6D67_0000);
    h = splitmix64(h ^ purpose as u64);
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, purpose, keys))
}
