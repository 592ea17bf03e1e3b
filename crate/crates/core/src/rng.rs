//! Counter-based random streams.
//!
//! Every stochastic draw in the crate comes from a stream keyed by
//! `(seed, domain, index)`, so results do not depend on scheduling or on the
//! number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Keeping them distinct prevents two consumers that share a
/// seed from seeing correlated draws.
pub mod domain {
    pub const DECALIBRATION: u64 = 1;
    pub const EMULATION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const SILENCE: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const READOUT_HIDDEN: u64 = 10;
    pub const READOUT_OUTPUT: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Random stream for item `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, domain]));
    rng.set_stream(index);
    rng
}
