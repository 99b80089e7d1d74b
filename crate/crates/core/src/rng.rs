//! Seeded random streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from a base seed and a tuple of integer tags with SplitMix64
//! mixing. Tags identify the consumer (placement, emission, noise, ...) and the
//! (frame, agent) it works on, so streams never overlap and results do not
//! depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub const TAG_FRAME: u64 = 0x01;
pub const TAG_PLACE: u64 = 0x02;
pub const TAG_EMIT: u64 = 0x03;
pub const TAG_GROUND: u64 = 0x04;
pub const TAG_NOISE: u64 = 0x05;
pub const TAG_SURROGATE: u64 = 0x06;
pub const TAG_FALSE_POS: u64 = 0x07;
pub const TAG_LICL: u64 = 0x08;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
