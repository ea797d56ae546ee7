//! Seeded inputs shared by the benchmarks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tokentrim::{CacheLayout, KVCache, LatentSummary};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

pub fn summary(n_tokens: usize, dim: usize, step: usize, seed: u64) -> LatentSummary {
    LatentSummary::from_values(gaussian(n_tokens, dim, seed), step, 1)
        .expect("finite gaussian summary")
}

/// A rolling cache filled with `chunks` random chunks, every other one
/// partially pruned.
pub fn filled_cache(n_tokens: usize, head_dim: usize, chunks: usize) -> KVCache {
    let mut cache = KVCache::new(CacheLayout::Rolling { window: chunks }, n_tokens, head_dim)
        .expect("valid cache");
    for step in 1..=chunks {
        let seed = step as u64;
        cache
            .append_chunk(
                gaussian(n_tokens, head_dim, seed),
                gaussian(n_tokens, head_dim, seed + 1000),
                step,
            )
            .expect("chunk fits");
        if step % 2 == 0 {
            let drop: Vec<usize> = (0..n_tokens).step_by(7).collect();
            let mask = tokentrim::PruneMask::dropping(n_tokens, &drop).expect("indices in range");
            cache.apply_prune(&mask).expect("mask fits");
        }
    }
    cache
}
