//! Seeded random streams.
//!
//! Every random draw in the engine comes from a ChaCha20 generator, which is
//! counter based: a `(seed, stream)` pair addresses an independent keystream,
//! and output is identical on every platform. Stream ids are fixed:
//!
//! | stream | use |
//! |--------|-----|
//! | 0 | system noise of a trajectory (Euler-Maruyama increments, discrete innovations, SLDS regime draws) |
//! | 1, 2, 3 | observation noise for the train / val / test segment of one noise realization |
//! | 16.. | auxiliary consumers (bootstrap, model init, sampling), offset by caller |

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha20Rng;

pub const TRAJECTORY_STREAM: u64 = 0;
pub const NOISE_STREAM_BASE: u64 = 1;
pub const AUX_STREAM_BASE: u64 = 16;

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of the `realization`-th noise realization derived from a base noise seed.
pub fn realization_seed(noise_seed: u64, realization: u64) -> u64 {
    // splitmix64 finalizer, keeps nearby seeds far apart
    let mut z = noise_seed.wrapping_add(realization.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
