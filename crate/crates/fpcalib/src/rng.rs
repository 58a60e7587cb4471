//! Deterministic random-number plumbing.
//!
//! Every stochastic ingredient in the crate (initial noise, DDPM ancestral
//! noise, Resampling's fresh injection noise, Monte-Carlo estimators) draws
//! from a [`ChaCha8Rng`] that is derived, not shared: a run seed plus a small
//! tuple of tags (timestep, iteration index, purpose) is mixed into a fresh
//! generator seed. Two consequences matter:
//!
//! - reproducibility is independent of evaluation order, so trajectories can
//!   be distributed across workers without changing a single draw;
//! - the noise consumed at step `t`, iteration `k` is a pure function of
//!   `(seed, t, k)`, which is what "seeded per step and iteration" means for
//!   the Resampling operator.
//!
//! The mixing function is splitmix64, the standard 64-bit finalizer used to
//! expand seeds for other generators.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One round of splitmix64: maps any 64-bit value to a well-mixed successor.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a single derived seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &tag in tags {
        state = splitmix64(state ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    state
}

/// A fresh generator for the given base seed and tag tuple.
pub fn derived_rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// `n` i.i.d. standard-normal draws from the generator.
pub fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
