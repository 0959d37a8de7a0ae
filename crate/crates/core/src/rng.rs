//! Deterministic random streams.
//!
//! Every random draw in a run comes from a stream keyed by the master seed,
//! a purpose tag, and the coordinates of the draw (step, worker ids, ...).
//! Streams are derived by hashing, so the order in which workers are
//! evaluated never changes what they see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Gradient = 1,
    Attack = 2,
    Partition = 3,
    Contraction = 4,
    Data = 5,
    Variation = 6,
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `(master, purpose, parts...)` into a 64-bit seed.
pub fn derive_seed(master: u64, purpose: Purpose, parts: &[u64]) -> u64 {
    const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut h = mix(master.wrapping_add(GOLDEN));
    h = mix(h ^ (purpose as u64).wrapping_mul(GOLDEN));
    for (i, p) in parts.iter().enumerate() {
        h = mix(h ^ p.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN)));
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, parts: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, parts))
}

/// The plain seeded stream used by topology generators.
pub fn seeded(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}
