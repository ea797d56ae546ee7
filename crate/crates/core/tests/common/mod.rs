//! Brute-force reference implementations. Each one is written from the
//! definition, without reusing the library's code paths.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tokentrim::{CacheLayout, KVCache, PruneMask};

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn row_norms_of_difference(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    assert_eq!(a.dim(), b.dim());
    let (n, d) = a.dim();
    (0..n)
        .map(|i| compensated_sum((0..d).map(|j| (a[[i, j]] - b[[i, j]]).powi(2))).sqrt())
        .collect()
}

/// `ceil(num * n / den)` in exact integer arithmetic.
pub fn ceil_ratio(num: usize, n: usize, den: usize) -> usize {
    (num * n).div_ceil(den)
}

/// Top `k` by full sort: drift descending, index ascending.
pub fn top_k_by_full_sort(drift: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..drift.len()).collect();
    idx.sort_by(|&a, &b| {
        drift[b]
            .partial_cmp(&drift[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn mean_of(drift: &[f64], set: &[usize]) -> f64 {
    compensated_sum(set.iter().map(|&i| drift[i])) / set.len() as f64
}

/// Two-pass population mean and standard deviation.
pub fn two_pass_moments(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    let var = compensated_sum(xs.iter().map(|x| (x - mean).powi(2))) / n;
    (mean, var.sqrt())
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Attention over every row of `k`/`v`, with rows where `keep` is false given
/// a score of negative infinity.
pub fn masked_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    keep: &[bool],
) -> Array2<f64> {
    let d = q.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for i in 0..q.nrows() {
        let scores: Vec<f64> = (0..k.nrows())
            .map(|j| {
                if keep[j] {
                    compensated_sum((0..d).map(|c| q[[i, c]] * k[[j, c]])) * scale
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z = compensated_sum(weights.iter().copied());
        for c in 0..v.ncols() {
            out[[i, c]] = compensated_sum((0..k.nrows()).map(|j| weights[j] * v[[j, c]])) / z;
        }
    }
    out
}

/// Current rows followed by every cached row, dead or alive, plus the
/// matching keep mask.
pub fn full_context(
    cache: &KVCache,
    k_curr: &Array2<f64>,
    v_curr: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Vec<bool>) {
    let mut k_rows = vec![k_curr.clone()];
    let mut v_rows = vec![v_curr.clone()];
    let mut keep = vec![true; k_curr.nrows()];
    for e in cache.entries() {
        k_rows.push(e.keys.clone());
        v_rows.push(e.values.clone());
        keep.extend_from_slice(&e.alive);
    }
    let kv = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
    };
    (kv(&k_rows), kv(&v_rows), keep)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn random_layout(rng: &mut ChaCha8Rng) -> CacheLayout {
    if rng.random_bool(0.5) {
        CacheLayout::Rolling {
            window: rng.random_range(1..=5),
        }
    } else {
        CacheLayout::AnchorRecent {
            anchor: rng.random_range(1..=2),
            recent: rng.random_range(1..=4),
        }
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> PruneMask {
    let drop_rate: f64 = rng.random_range(0.0..=1.0);
    PruneMask::from_keep((0..n).map(|_| !rng.random_bool(drop_rate)).collect())
}

/// A cache with a random layout, filled through a random sequence of
/// appends and prunes.
pub fn random_cache(rng: &mut ChaCha8Rng, n: usize, d: usize) -> KVCache {
    let mut cache = KVCache::new(random_layout(rng), n, d).unwrap();
    let chunks = rng.random_range(1..=8);
    for step in 1..=chunks {
        let scale = rng.random_range(0.1..3.0);
        cache
            .append_chunk(gaussian(rng, n, d, scale), gaussian(rng, n, d, 1.0), step)
            .unwrap();
        if rng.random_bool(0.6) {
            cache.apply_prune(&random_mask(rng, n)).unwrap();
        }
    }
    cache
}
