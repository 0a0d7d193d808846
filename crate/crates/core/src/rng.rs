//! Seeded random streams.
//!
//! One run seed fans out into independent ChaCha8 streams keyed by purpose
//! and an index (epoch, shard, ...), so drawing more numbers for one purpose
//! never shifts another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Synth = 4,
    MonteCarlo = 5,
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// A `u64` seed drawn from a substream, for APIs that take a plain seed.
pub fn substream_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    substream(seed, purpose, index).next_u64()
}

/// Standard normal draw by the Box–Muller transform; consumes two uniforms
/// and returns the cosine branch.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps the log finite
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
