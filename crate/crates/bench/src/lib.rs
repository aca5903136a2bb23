//! Fixtures shared by the benchmarks.

use hallucinator_core::feature_store::FeatureSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` standard normal rows of width `dim`.
pub fn gaussian_set(n: usize, dim: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureSet::new(dim, data).expect("n and dim are positive")
}
