//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator. A run has one root seed; each consumer gets an independent
//! stream keyed by `(purpose, index)` (for example "shuffle, epoch 3"), so
//! draws do not depend on the order in which consumers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    AttackStart = 4,
    Noise = 5,
    Certify = 6,
    Synthetic = 7,
    Test = 8,
}

/// Generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}
