//! Seeded, counter-addressable randomness.
//!
//! All randomness derives from ChaCha8 keyed by a 64-bit seed. A stream id
//! separates independent consumers, and the word position addresses an
//! individual draw, so any draw can be regenerated without replaying the
//! ones before it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids for the independent consumers of a run seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 3;
    pub const BENCH: u64 = 4;
    /// Random patch scores use `SORT_BASE + iteration`.
    pub const SORT_BASE: u64 = 1 << 48;
    /// Epoch shuffles use `SHUFFLE_BASE + epoch`.
    pub const SHUFFLE_BASE: u64 = 2 << 48;
}

pub fn generator(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Maps 32 random bits to the open interval (0, 1).
pub fn unit_open(bits: u32) -> f64 {
    ((bits >> 8) as f64 + 0.5) * (1.0 / (1u64 << 24) as f64)
}

/// `count` uniform draws starting at counter `offset` of `(seed, stream)`.
pub fn uniform_block(seed: u64, stream: u64, offset: u64, count: usize) -> Vec<f64> {
    let mut rng = generator(seed, stream);
    rng.set_word_pos(offset as u128);
    (0..count).map(|_| unit_open(rng.next_u32())).collect()
}
