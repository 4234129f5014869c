//! Random-assignment control clusterings.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Each label uniform over `0..K`.
    #[default]
    Uniform,
    /// Each label drawn from the reference clustering's empirical proportions.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

pub fn random_assign(n: usize, k: usize, seed: u64) -> Result<RandomAssignment> {
    if n == 0 || k == 0 {
        return Err(Error::Config(format!(
            "random assignment needs n >= 1 and K >= 1 (n={n}, K={k})"
        )));
    }
    let mut rng = rng_from(seed);
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    Ok(RandomAssignment { labels, k, seed })
}

/// Independent draws matching the label frequencies of `reference`.
pub fn random_assign_proportional(
    reference: &[usize],
    k: usize,
    seed: u64,
) -> Result<RandomAssignment> {
    if reference.is_empty() || k == 0 {
        return Err(Error::Config("proportional baseline needs labels and K >= 1".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in reference {
        if l >= k {
            return Err(Error::Validation(format!("label {l} out of range for K={k}")));
        }
        counts[l] += 1;
    }
    let dist = WeightedIndex::new(&counts).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from(seed);
    let labels = (0..reference.len()).map(|_| dist.sample(&mut rng)).collect();
    Ok(RandomAssignment { labels, k, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn histogram(labels: &[usize], k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &l in labels {
            h[l] += 1;
        }
        h
    }

    #[test]
    fn single_cluster_is_all_zero() {
        let a = random_assign(37, 1, 5).unwrap();
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn frequencies_within_binomial_band() {
        // sd = sqrt(1e5 * 0.1 * 0.9) ~ 94.9, so 400 is a little over 4 sd
        let a = random_assign(100_000, 10, 2024).unwrap();
        for count in histogram(&a.labels, 10) {
            assert!((count as i64 - 10_000).abs() <= 400, "count {count}");
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = random_assign(500, 7, 9).unwrap();
        assert_eq!(a, random_assign(500, 7, 9).unwrap());
        assert_ne!(a.labels, random_assign(500, 7, 10).unwrap().labels);
        assert!(a.labels.iter().all(|&l| l < 7));
    }

    #[test]
    fn more_clusters_than_points_allowed() {
        let a = random_assign(3, 10, 1).unwrap();
        assert_eq!(a.labels.len(), 3);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(random_assign(0, 3, 1).is_err());
        assert!(random_assign(3, 0, 1).is_err());
    }

    #[test]
    fn chi_square_below_0999_quantile() {
        for (k, seed) in [(2usize, 1u64), (5, 2), (10, 3), (20, 4)] {
            let n = 10 * k * k * 10;
            let a = random_assign(n, k, seed).unwrap();
            let expected = n as f64 / k as f64;
            let stat: f64 = histogram(&a.labels, k)
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            let q = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(0.999);
            assert!(stat < q, "K={k}: chi2 {stat} >= {q}");
        }
    }

    #[test]
    fn proportional_follows_reference_marginals() {
        let mut reference = vec![0usize; 8000];
        reference.extend(vec![1usize; 2000]);
        let a = random_assign_proportional(&reference, 3, 4).unwrap();
        let h = histogram(&a.labels, 3);
        assert_eq!(h[2], 0);
        assert!((h[0] as i64 - 8000).abs() < 200, "{h:?}");
    }
}
