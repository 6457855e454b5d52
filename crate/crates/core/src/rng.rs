//! Seeded random streams.
//!
//! Every source of randomness derives from a root seed plus a stream id, so
//! runs are reproducible and independent consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;
pub const STREAM_AUGMENT: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const STREAM_SYNTHETIC: u64 = 6;

/// Rng for `(seed, stream, index)`. `index` usually counts epochs or steps.
pub fn stream(seed: u64, stream: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 32);
    rng
}
