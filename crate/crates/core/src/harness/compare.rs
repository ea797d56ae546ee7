use std::fmt;

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

use super::metrics::SeedSummary;

type Extract = fn(&SeedSummary) -> f64;

/// Metrics compared between two runs, in table order.
pub const METRICS: &[(&str, Extract)] = &[
    ("trigger_count", |s| s.aggregates.trigger_count as f64),
    ("regen_total", |s| s.aggregates.regen_total as f64),
    ("regeneration_rate", |s| s.aggregates.regeneration_rate),
    ("mean_severity_initial", |s| {
        s.aggregates.mean_severity_initial
    }),
    ("mean_severity_final", |s| s.aggregates.mean_severity_final),
    ("cumulative_drift_area", |s| {
        s.aggregates.cumulative_drift_area
    }),
    ("total_pruned", |s| s.aggregates.total_pruned as f64),
    ("mean_alive_rows", |s| s.aggregates.mean_alive_rows),
    ("final_distance", |s| s.fidelity.final_distance),
    ("early_distance", |s| s.fidelity.early_distance),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: String,
    /// `b - a` per seed, in seed order.
    pub deltas: Vec<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_delta: f64,
    pub increases: usize,
    pub decreases: usize,
    /// Two-sided exact sign test over non-zero deltas.
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricComparison>,
}

impl Comparison {
    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// Two-sided sign test p-value for `pos` increases and `neg` decreases.
pub fn sign_test(pos: usize, neg: usize) -> f64 {
    let n = (pos + neg) as u64;
    if n == 0 {
        return 1.0;
    }
    let k = pos.min(neg) as u64;
    let b = Binomial::new(0.5, n).expect("p = 0.5 is valid");
    (2.0 * b.cdf(k)).min(1.0)
}

/// Paired comparison of `b` against `a`. Both sides must cover the same seeds
/// in the same order with the same run length.
pub fn compare_runs(a: &[SeedSummary], b: &[SeedSummary]) -> Result<Comparison> {
    let seeds_a: Vec<u64> = a.iter().map(|s| s.seed).collect();
    let seeds_b: Vec<u64> = b.iter().map(|s| s.seed).collect();
    if seeds_a != seeds_b {
        return Err(Error::config(
            "seeds",
            format!("runs cover different seeds: {seeds_a:?} vs {seeds_b:?}"),
        ));
    }
    if seeds_a.is_empty() {
        return Err(Error::config("seeds", "nothing to compare"));
    }
    for (x, y) in a.iter().zip(b) {
        if x.aggregates.steps != y.aggregates.steps {
            return Err(Error::config(
                "steps",
                format!(
                    "seed {} ran {} steps in one run and {} in the other",
                    x.seed, x.aggregates.steps, y.aggregates.steps
                ),
            ));
        }
    }

    let n = a.len() as f64;
    let metrics = METRICS
        .iter()
        .map(|&(name, get)| {
            let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| get(y) - get(x)).collect();
            let increases = deltas.iter().filter(|&&d| d > 0.0).count();
            let decreases = deltas.iter().filter(|&&d| d < 0.0).count();
            MetricComparison {
                metric: name.to_string(),
                mean_a: a.iter().map(get).sum::<f64>() / n,
                mean_b: b.iter().map(get).sum::<f64>() / n,
                mean_delta: deltas.iter().sum::<f64>() / n,
                sign_test_p: sign_test(increases, decreases),
                increases,
                decreases,
                deltas,
            }
        })
        .collect();
    Ok(Comparison {
        seeds: seeds_a,
        metrics,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>12} {:>12} {:>12} {:>5} {:>5} {:>9}",
            "metric", "mean A", "mean B", "mean B-A", "B>A", "B<A", "sign p"
        )?;
        for m in &self.metrics {
            writeln!(
                f,
                "{:<24} {:>12.6} {:>12.6} {:>+12.6} {:>5} {:>5} {:>9.3e}",
                m.metric, m.mean_a, m.mean_b, m.mean_delta, m.increases, m.decreases, m.sign_test_p
            )?;
        }
        write!(f, "{} paired seeds", self.seeds.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test(0, 0), 1.0);
        // 10 of 10 in one direction: 2 * 0.5^10.
        assert!((sign_test(10, 0) - 2.0 / 1024.0).abs() < 1e-15);
        // Balanced splits are capped at 1.
        assert_eq!(sign_test(5, 5), 1.0);
        // 8 vs 2: 2 * (1 + 10 + 45) / 1024.
        assert!((sign_test(2, 8) - 112.0 / 1024.0).abs() < 1e-12);
    }
}
