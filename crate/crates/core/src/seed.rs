//! Deterministic fan-out of one user seed into independent streams.
//!
//! Every randomized component derives its generator as
//! `rng(seed, &[STREAM_TAG, index...])`. The derivation is a SplitMix64
//! chain over the tag path, so results never depend on thread scheduling
//! or on how many workers run: two components with different tag paths get
//! unrelated streams, and the same path always yields the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tag for cohort splitting.
pub const STREAM_SPLIT: u64 = 1;
/// Stream tag for permutation tests (per MOB node).
pub const STREAM_MOB: u64 = 2;
/// Stream tag for forest tree growth.
pub const STREAM_FOREST: u64 = 3;
/// Stream tag for bootstrap resampling.
pub const STREAM_BOOTSTRAP: u64 = 4;
/// Stream tag for CART growth and pruning folds.
pub const STREAM_CART: u64 = 5;
/// Stream tag for synthetic data generation.
pub const STREAM_SYNDATA: u64 = 6;
/// Stream tag for the causal-tree baseline.
pub const STREAM_CAUSAL_TREE: u64 = 7;
/// Stream tag for cross-validation fold assignment.
pub const STREAM_CV: u64 = 8;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapses `(seed, tags)` into a single derived 64-bit seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(0xA5A5_A5A5_A5A5_A5A5)));
    }
    state
}

/// ChaCha stream for the given tag path.
pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
