//! Seeded random streams.
//!
//! Every stochastic routine draws from ChaCha8 seeded with the caller's
//! `u64` seed. Independent sub-streams (one per trajectory, per optimizer
//! step, ...) are selected with the ChaCha stream id rather than by
//! re-seeding, so sub-stream `i` is the same regardless of how many other
//! sub-streams were consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for sub-stream `index` of `seed`.
pub fn stream_rng(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
