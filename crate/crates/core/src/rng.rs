//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids used by the trainer and synthesizer.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const EPSILON: u64 = 3;
    /// Pixel noise draws, kept apart from mask placement so a recorded
    /// artifact model replays without re-drawing its masks.
    pub const NOISE: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SHUFFLE_STAGE2: u64 = 7;
    pub const EPSILON_STAGE2: u64 = 8;
    /// Stage-2 decoder `i` initializes from `DECODER_BASE + i`.
    pub const DECODER_BASE: u64 = 100;
}

pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
