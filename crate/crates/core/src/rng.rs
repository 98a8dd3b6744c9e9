//! Seed fan-out: one root seed, independent ChaCha streams per consumer.
//!
//! Each consumer gets its own stream id, so adding draws in one module
//! never shifts the numbers another module sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SYNTH: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_PERCEIVER_INIT: u64 = 3;
pub const STREAM_PERCEIVER_TRAIN: u64 = 4;
pub const STREAM_SELECTOR_INIT: u64 = 5;
pub const STREAM_SELECTOR_TRAIN: u64 = 6;
pub const STREAM_DECODER_INIT: u64 = 7;
pub const STREAM_DECODER_TRAIN: u64 = 8;
pub const STREAM_TEST: u64 = 15;

/// RNG for `(root seed, consumer)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for `(root seed, consumer, item)`, e.g. one dialogue of a corpus.
pub fn item_rng(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    stream_rng(seed, (stream << 40) | (item & ((1 << 40) - 1)))
}
