//! Counter-keyed random substreams.
//!
//! A substream is identified by a base seed and a short key of integers (point
//! id, timestep index, draw index, class, ...). The key is folded into a 64-bit
//! ChaCha stream id, so any work item can regenerate its noise without
//! coordination and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Key slot used when a draw is shared across classes.
pub const SHARED: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key into a single well-mixed 64-bit value.
pub fn fold_key(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x6A09_E667_F3BC_C908u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Derives a child seed; used to hand a fresh seed to nested computations.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    splitmix64(seed ^ fold_key(key))
}

/// Deterministic RNG for `(seed, key)`.
pub fn substream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold_key(key));
    rng
}

/// Fills `out` with standard normal draws from substream `(seed, key)`.
pub fn fill_gaussian(seed: u64, key: &[u64], out: &mut [f64]) {
    let mut rng = substream(seed, key);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

pub fn gaussian_vec(seed: u64, key: &[u64], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    fill_gaussian(seed, key, &mut v);
    v
}
