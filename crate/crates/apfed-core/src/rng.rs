//! Seeded random primitives.
//!
//! Built directly on ChaCha8 with explicit bit manipulation so streams stay
//! identical across dependency upgrades. Every consumer of randomness in the
//! engine derives its values from these helpers and a caller-supplied seed.

use rand_core::SeedableRng;

pub use rand_chacha::ChaCha8Rng;
pub use rand_core::RngCore;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a stream index.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    seeded(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    // Shift into (0, 1] so the log argument is never zero.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<R: RngCore, T>(rng: &mut R, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        xs.swap(i, j);
    }
}
