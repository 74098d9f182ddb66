//! Seedable, portable random streams.
//!
//! Every stochastic operation in this workspace takes an explicit stream
//! handle. Streams are ChaCha8 generators: identical seeds give identical
//! draws on every platform, and independent sub-streams can be carved out
//! of one seed for parallel workers without sharing state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Root stream for a seed.
pub fn seeded(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` under the same seed. Streams with different ids
/// never overlap.
pub fn seeded_stream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Child stream derived by drawing a seed from the parent. Advances the
/// parent, so repeated splits yield distinct children.
pub fn split(parent: &mut Stream) -> Stream {
    ChaCha8Rng::seed_from_u64(parent.gen())
}

pub fn standard_normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn standard_normal_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}
