//! Semantic density: mean cosine similarity of same-cluster embedding pairs.
//!
//! Two pairing protocols are available. [`PairingMode::PerPoint`] draws a
//! stratified sample of points (cluster quotas proportional to size) and pairs
//! each with one uniformly chosen distinct partner from its own cluster.
//! [`PairingMode::PerClusterCap`] instead draws up to a fixed number of
//! distinct unordered pairs inside every cluster.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{cosine, EmbeddingStore};
use crate::error::{Error, Result};
use crate::seed::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    #[default]
    PerPoint,
    PerClusterCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    /// Stratified sample size for [`PairingMode::PerPoint`].
    pub target: usize,
    pub mode: PairingMode,
    /// Pair cap per cluster for [`PairingMode::PerClusterCap`].
    pub pair_cap_per_cluster: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            target: 10_000,
            mode: PairingMode::PerPoint,
            pair_cap_per_cluster: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub k: usize,
    pub n_pairs: usize,
    pub mean_sim: f64,
    /// Standard deviation of pair similarities over `sqrt(n_pairs)`.
    pub sem_pairs: f64,
    /// Standard deviation of per-cluster means over `sqrt(#clusters with pairs)`.
    pub sem_clusters: f64,
    /// `None` for clusters that produced no pair.
    pub per_cluster_means: Vec<Option<f64>>,
    pub per_cluster_pairs: Vec<usize>,
    /// Sampled points skipped because their cluster is a singleton.
    pub n_singleton_skipped: usize,
}

fn cluster_members(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

fn k_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Hamilton (largest-remainder) apportionment of `min(target, n)` over
/// cluster sizes. Remainder ties go to the lower cluster index; clusters whose
/// exact share is below one can receive zero.
pub fn stratified_quotas(sizes: &[usize], target: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let total = target.min(n) as u128;
    let n = n as u128;
    let mut quotas: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(sizes.len());
    for (c, &s) in sizes.iter().enumerate() {
        let scaled = total * s as u128;
        quotas.push((scaled / n) as usize);
        remainders.push((scaled % n, c));
    }
    let assigned: usize = quotas.iter().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().take(total as usize - assigned) {
        quotas[c] += 1;
    }
    quotas
}

/// Proportional stratified sample without replacement, sorted ascending.
pub fn stratified_sample(labels: &[usize], target: usize, seed: u64) -> Vec<usize> {
    let k = k_of(labels);
    let members = cluster_members(labels, k);
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = stratified_quotas(&sizes, target);
    let mut out = Vec::with_capacity(quotas.iter().sum());
    for (c, (m, &q)) in members.iter().zip(&quotas).enumerate() {
        let mut rng = substream(seed, c as u64);
        out.extend(index::sample(&mut rng, m.len(), q).into_iter().map(|i| m[i]));
    }
    out.sort_unstable();
    out
}

/// Unordered pair `(i, j)`, `i < j`, at colexicographic position `p`.
fn decode_pair(p: u64) -> (u64, u64) {
    let mut j = ((1.0 + (1.0 + 8.0 * p as f64).sqrt()) / 2.0) as u64;
    while j * (j - 1) / 2 > p {
        j -= 1;
    }
    while (j + 1) * j / 2 <= p {
        j += 1;
    }
    (p - j * (j - 1) / 2, j)
}

fn std_dev(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Labelled pair similarities; exposed for tests and diagnostics.
pub fn sample_pairs(
    labels: &[usize],
    cfg: &DensityConfig,
    seed: u64,
) -> (Vec<(usize, usize)>, usize) {
    let k = k_of(labels);
    let members = cluster_members(labels, k);
    let mut pairs = Vec::new();
    let mut skipped = 0;
    match cfg.mode {
        PairingMode::PerPoint => {
            let mut position = vec![0usize; labels.len()];
            for m in &members {
                for (p, &i) in m.iter().enumerate() {
                    position[i] = p;
                }
            }
            let mut rng = substream(seed, u64::MAX - 1);
            for i in stratified_sample(labels, cfg.target, seed) {
                let m = &members[labels[i]];
                if m.len() < 2 {
                    skipped += 1;
                    continue;
                }
                let r = rng.random_range(0..m.len() - 1);
                let j = if r < position[i] { m[r] } else { m[r + 1] };
                pairs.push((i, j));
            }
        }
        PairingMode::PerClusterCap => {
            for (c, m) in members.iter().enumerate() {
                if m.len() < 2 {
                    skipped += m.len();
                    continue;
                }
                let s = m.len() as u64;
                let available = s * (s - 1) / 2;
                let take = (cfg.pair_cap_per_cluster as u64).min(available);
                let mut rng = substream(seed, c as u64);
                let mut picks: Vec<usize> =
                    index::sample(&mut rng, available as usize, take as usize).into_vec();
                picks.sort_unstable();
                for p in picks {
                    let (a, b) = decode_pair(p as u64);
                    pairs.push((m[a as usize], m[b as usize]));
                }
            }
        }
    }
    (pairs, skipped)
}

pub fn semantic_density(
    store: &EmbeddingStore,
    labels: &[usize],
    cfg: &DensityConfig,
    seed: u64,
) -> Result<DensityReport> {
    if labels.len() != store.len() {
        return Err(Error::Alignment(format!(
            "{} labels for {} embedding rows",
            labels.len(),
            store.len()
        )));
    }
    if cfg.target == 0 {
        return Err(Error::Config("density target must be at least 1".into()));
    }
    let k = k_of(labels);
    let (pairs, skipped) = sample_pairs(labels, cfg, seed);
    if pairs.is_empty() {
        return Err(Error::EmptyReport(
            "no within-cluster pairs (all sampled clusters are singletons)".into(),
        ));
    }
    let mut sims = Vec::with_capacity(pairs.len());
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for &(i, j) in &pairs {
        let s = cosine(store.row(i), store.row(j))?;
        sims.push(s);
        sums[labels[i]] += s;
        counts[labels[i]] += 1;
    }
    let mean_sim = sims.iter().sum::<f64>() / sims.len() as f64;
    let sem_pairs = std_dev(&sims, mean_sim) / (sims.len() as f64).sqrt();
    let per_cluster_means: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per_cluster_means.iter().flatten().copied().collect();
    let cluster_mean = present.iter().sum::<f64>() / present.len() as f64;
    let sem_clusters = std_dev(&present, cluster_mean) / (present.len() as f64).sqrt();
    Ok(DensityReport {
        k,
        n_pairs: sims.len(),
        mean_sim,
        sem_pairs,
        sem_clusters,
        per_cluster_means,
        per_cluster_pairs: counts,
        n_singleton_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(rows: &[Vec<f64>]) -> EmbeddingStore {
        let ids = (0..rows.len()).map(|i| format!("d{i}")).collect();
        EmbeddingStore::from_rows(ids, rows).unwrap()
    }

    #[test]
    fn quota_examples() {
        assert_eq!(stratified_quotas(&[60, 40], 10), vec![6, 4]);
        assert_eq!(stratified_quotas(&[50, 50, 1], 10), vec![5, 5, 0]);
        assert_eq!(stratified_quotas(&[300, 200], 10_000), vec![300, 200]);
        assert_eq!(stratified_quotas(&[0, 10], 5), vec![0, 5]);
    }

    #[test]
    fn sample_caps_at_population() {
        let labels: Vec<usize> = (0..500).map(|i| i % 3).collect();
        let s = stratified_sample(&labels, 10_000, 1);
        assert_eq!(s, (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn sample_is_proportional_and_deterministic() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 60)).collect();
        let s = stratified_sample(&labels, 10, 3);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 0).count(), 6);
        assert_eq!(s, stratified_sample(&labels, 10, 3));
    }

    #[test]
    fn pair_decoding_enumerates_all_pairs() {
        let mut seen = Vec::new();
        for p in 0..45u64 {
            seen.push(decode_pair(p));
        }
        let mut expected = Vec::new();
        for j in 1..10u64 {
            for i in 0..j {
                expected.push((i, j));
            }
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn identical_embeddings_have_unit_density() {
        let s = store(&vec![vec![0.3, -1.2, 2.0]; 40]);
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = semantic_density(&s, &labels, &DensityConfig::default(), 5).unwrap();
        assert!((r.mean_sim - 1.0).abs() < 1e-12);
        assert!(r.sem_pairs < 1e-12);
        assert_eq!(r.n_pairs, 40);
    }

    #[test]
    fn pairs_never_cross_clusters() {
        let mut rows = vec![vec![1.0, 0.0]; 20];
        rows.extend(vec![vec![0.0, 1.0]; 20]);
        let s = store(&rows);
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        for cfg in [
            DensityConfig::default(),
            DensityConfig {
                mode: PairingMode::PerClusterCap,
                pair_cap_per_cluster: 50,
                ..Default::default()
            },
        ] {
            let r = semantic_density(&s, &labels, &cfg, 2).unwrap();
            assert_eq!(r.mean_sim, 1.0);
        }
    }

    #[test]
    fn per_cluster_cap_counts() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![1.0, i as f64]).collect();
        let s = store(&rows);
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i >= 5)).collect();
        let cfg = DensityConfig {
            mode: PairingMode::PerClusterCap,
            pair_cap_per_cluster: 100,
            ..Default::default()
        };
        let r = semantic_density(&s, &labels, &cfg, 2).unwrap();
        // 5 points give all 10 pairs; 25 points give 300 pairs, capped at 100
        assert_eq!(r.per_cluster_pairs, vec![10, 100]);
    }

    #[test]
    fn all_singletons_is_an_error() {
        let s = store(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            semantic_density(&s, &[0, 1], &DensityConfig::default(), 0),
            Err(Error::EmptyReport(_))
        ));
    }

    #[test]
    fn singletons_are_skipped_and_flagged() {
        let s = store(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![1.0, 0.2], vec![0.0, 1.0]]);
        let r = semantic_density(&s, &[0, 0, 0, 1], &DensityConfig::default(), 0).unwrap();
        assert_eq!(r.n_singleton_skipped, 1);
        assert_eq!(r.per_cluster_means[1], None);
        assert_eq!(r.sem_clusters, 0.0);
    }

    proptest! {
        #[test]
        fn emitted_pairs_share_label(labels in prop::collection::vec(0usize..6, 2..200), seed in any::<u64>()) {
            for mode in [PairingMode::PerPoint, PairingMode::PerClusterCap] {
                let cfg = DensityConfig { target: 50, mode, pair_cap_per_cluster: 20 };
                let (pairs, _) = sample_pairs(&labels, &cfg, seed);
                for (i, j) in pairs {
                    prop_assert_ne!(i, j);
                    prop_assert_eq!(labels[i], labels[j]);
                }
            }
        }

        #[test]
        fn quotas_sum_to_capped_target(sizes in prop::collection::vec(0usize..500, 1..20), target in 1usize..3000) {
            let q = stratified_quotas(&sizes, target);
            let n: usize = sizes.iter().sum();
            prop_assert_eq!(q.iter().sum::<usize>(), target.min(n));
            for (qi, si) in q.iter().zip(&sizes) {
                prop_assert!(qi <= si);
            }
        }
    }
}
