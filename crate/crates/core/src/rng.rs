//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the run seed and a per-item stream id, so work items can be
//! generated in any order (or in parallel) with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser; mixes a seed and a stream index into a new seed.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream_id))
}

/// Domain tags keep streams of different subsystems apart.
pub mod domain {
    pub const RALLY: u64 = 0x5241_4c4c;
    pub const CAMERA: u64 = 0x4341_4d45;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const ENSEMBLE: u64 = 0x454e_534d;
    pub const CORRUPT: u64 = 0x434f_5252;
}

pub fn tagged(seed: u64, domain: u64, index: u64) -> Rng {
    stream(mix(seed, domain), index)
}
