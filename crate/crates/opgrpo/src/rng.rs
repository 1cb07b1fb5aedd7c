//! Deterministic keyed RNG streams.
//!
//! Every random draw in a run is made from a stream keyed by
//! (master seed, context tags) — e.g. (iteration, condition id, member
//! index) for a rollout. Streams are order-independent: two trajectories
//! sampled in either order produce identical results, which is what makes
//! fixed-seed reruns and checkpoint resume bit-exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a master seed and context tags; used to key a
/// whole family of downstream streams (e.g. one per group slot).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x6f706772706f5f31); // domain separation
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// Derive an independent RNG stream from a master seed and context tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
