//! Seeded random streams.
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`), a
//! counter-based generator whose output is fixed by its key, stream id and
//! position on every platform. A run seed becomes the key via
//! `seed_from_u64`; each consumer gets its own stream id, so drawing more
//! values in one place never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub use rand_chacha::ChaCha20Rng as RunRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Dropout = 4,
    Warmup = 5,
    FreshInit = 6,
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, which: Stream) -> ChaCha20Rng {
    stream_at(seed, which, 0)
}

/// Generator for `(seed, stream, sub)`, e.g. one per epoch.
pub fn stream_at(seed: u64, which: Stream, sub: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 32) | sub as u64);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal(0, std) redrawn until it lies within two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
