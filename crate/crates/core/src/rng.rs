//! Portable seeded randomness.
//!
//! All stochastic code takes a [`Rng`], which is ChaCha8 seeded from a `u64`.
//! ChaCha output is specified bit-for-bit, so a seed reproduces the same
//! stream on every platform.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub const ALGORITHM: &str = "chacha8";

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
///
/// Used to give every document, sample or worker its own reproducible
/// stream regardless of scheduling order.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
