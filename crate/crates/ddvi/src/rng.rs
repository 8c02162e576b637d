//! Deterministic seed derivation and Gaussian sampling.
//!
//! Every random draw in the library comes from a ChaCha stream whose seed is
//! derived from the master seed plus a list of integer tags (purpose id,
//! iteration, sample index, ...) folded through splitmix64. Streams for
//! different tag lists are independent, and a given tag list always yields
//! the same stream, which is what makes checkpoint resume bit-exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream purpose tags. Kept in one place so no two call sites collide.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MINIBATCH: u64 = 3;
    pub const ELBO: u64 = 4;
    pub const PREDICT: u64 = 5;
    pub const PCA: u64 = 6;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `master` one splitmix64 round per tag.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545f4914f6cdd1d);
        out = splitmix64(&mut state);
    }
    out
}

pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
