//! Seed derivation for reproducible, independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream purposes. Each gets its own ChaCha stream so that,
/// e.g., undersampling and batch shuffling never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Undersample = 2,
    Shuffle = 3,
    Synth = 4,
    Test = 99,
}

/// Generator for `(seed, purpose, index)`, e.g. index = epoch or day.
pub fn derived(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) ^ index);
    rng
}
