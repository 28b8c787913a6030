//! Seed derivation.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by
//! `(base seed, round, vehicle, purpose)`, so results do not depend on the
//! order in which vehicles are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Train = 3,
    Sensitivity = 4,
    Uplink = 5,
    Downlink = 6,
    Split = 7,
    Centralized = 8,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with an arbitrary list of stream coordinates.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derive_seed(base: u64, round: usize, vehicle: usize, purpose: Purpose) -> u64 {
    mix(base, &[round as u64, vehicle as u64, purpose as u64])
}

pub fn stream(base: u64, round: usize, vehicle: usize, purpose: Purpose) -> Rng {
    Rng::seed_from_u64(derive_seed(base, round, vehicle, purpose))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
