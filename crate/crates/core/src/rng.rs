//! Seeded pseudo-random numbers.
//!
//! All randomness flows through xoshiro256** seeded by SplitMix64 expansion of
//! a single `u64`. Floats are produced from the top 53 bits of each draw, so
//! sequences are identical on every platform.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
#[inline]
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Index in `0..n` by widening multiply.
#[inline]
pub fn index(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "index range must be nonempty");
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}
