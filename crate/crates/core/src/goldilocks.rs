//! Rank-crossing detection between AMI and accuracy z-score curves.
//!
//! For each K the GMM metric is expressed in standard deviations above the
//! random baseline, K values are ranked per metric (1 = farthest above),
//! and the zone is the densest run of points where the two rank curves meet.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric_name: String,
    pub k_values: Vec<usize>,
    pub gmm_mean: Vec<f64>,
    pub gmm_std: Vec<f64>,
    pub rand_mean: Vec<f64>,
    pub rand_std: Vec<f64>,
    pub n_datasets: Vec<usize>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

impl MetricSeries {
    /// Aggregates per-dataset values: `per_k[K] = (gmm values, random values)`.
    pub fn aggregate(metric_name: &str, per_k: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut s = MetricSeries {
            metric_name: metric_name.to_string(),
            k_values: Vec::new(),
            gmm_mean: Vec::new(),
            gmm_std: Vec::new(),
            rand_mean: Vec::new(),
            rand_std: Vec::new(),
            n_datasets: Vec::new(),
        };
        for (&k, (gmm, rand)) in per_k {
            if gmm.len() != rand.len() || gmm.is_empty() {
                return Err(Error::Validation(format!(
                    "{metric_name} at K={k}: {} GMM values vs {} random values",
                    gmm.len(),
                    rand.len()
                )));
            }
            let (gm, gs) = mean_std(gmm);
            let (rm, rs) = mean_std(rand);
            s.k_values.push(k);
            s.gmm_mean.push(gm);
            s.gmm_std.push(gs);
            s.rand_mean.push(rm);
            s.rand_std.push(rs);
            s.n_datasets.push(gmm.len());
        }
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let n = self.k_values.len();
        for (name, len) in [
            ("gmm_mean", self.gmm_mean.len()),
            ("gmm_std", self.gmm_std.len()),
            ("rand_mean", self.rand_mean.len()),
            ("rand_std", self.rand_std.len()),
        ] {
            if len != n {
                return Err(Error::Validation(format!(
                    "{}: {name} has {len} entries for {n} K values",
                    self.metric_name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    #[serde(with = "crate::serde_float")]
    pub value: f64,
    /// Set when the random baseline had zero spread and `value` is a sentinel.
    pub flagged: bool,
}

pub fn z_scores(series: &MetricSeries) -> Result<Vec<ZScore>> {
    series.check()?;
    Ok((0..series.k_values.len())
        .map(|i| {
            let num = series.gmm_mean[i] - series.rand_mean[i];
            let sd = series.rand_std[i];
            if sd > 0.0 {
                ZScore {
                    value: num / sd,
                    flagged: false,
                }
            } else {
                let value = if num > 0.0 {
                    f64::INFINITY
                } else if num < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                ZScore { value, flagged: true }
            }
        })
        .collect())
}

/// Rank 1 for the largest value; ties share the mean of their ranks.
pub fn rank_desc(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// K values where the rank curves meet: `d = a - b` is zero there, or
/// changes strict sign before the next K (left endpoint reported).
pub fn find_crossings(k_values: &[usize], rank_a: &[f64], rank_b: &[f64]) -> Result<Vec<usize>> {
    if rank_a.len() != k_values.len() || rank_b.len() != k_values.len() {
        return Err(Error::Validation("rank curves are not on the same K grid".into()));
    }
    let d: Vec<f64> = rank_a.iter().zip(rank_b).map(|(a, b)| a - b).collect();
    let mut out = Vec::new();
    for i in 0..d.len() {
        let flips = i + 1 < d.len() && d[i] != 0.0 && d[i + 1] != 0.0 && (d[i] > 0.0) != (d[i + 1] > 0.0);
        if d[i] == 0.0 || flips {
            out.push(k_values[i]);
        }
    }
    Ok(out)
}

/// `[K_lo, K_hi]` of the run with the most crossings, where consecutive
/// crossings in a run are at most `max_gap` apart. Ties go to the lower run.
pub fn goldilocks_zone(crossings: &[usize], max_gap: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    let mut start = 0;
    for i in 0..crossings.len() {
        let ends_run = i + 1 == crossings.len() || crossings[i + 1] - crossings[i] > max_gap;
        if ends_run {
            let count = i - start + 1;
            if best.is_none_or(|(c, _, _)| count > c) {
                best = Some((count, crossings[start], crossings[i]));
            }
            start = i + 1;
        }
    }
    best.map(|(_, lo, hi)| (lo, hi))
}

pub const DEFAULT_MAX_GAP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldilocksReport {
    pub k_values: Vec<usize>,
    pub z_ami: Vec<ZScore>,
    pub z_acc: Vec<ZScore>,
    pub rank_ami: Vec<f64>,
    pub rank_acc: Vec<f64>,
    pub crossings: Vec<usize>,
    pub zone: Option<(usize, usize)>,
    pub max_gap: usize,
}

impl GoldilocksReport {
    pub fn build(ami: &MetricSeries, acc: &MetricSeries, max_gap: usize) -> Result<Self> {
        if ami.k_values != acc.k_values {
            return Err(Error::Validation("AMI and accuracy series cover different K".into()));
        }
        let z_ami = z_scores(ami)?;
        let z_acc = z_scores(acc)?;
        let rank_ami = rank_desc(&z_ami.iter().map(|z| z.value).collect::<Vec<_>>());
        let rank_acc = rank_desc(&z_acc.iter().map(|z| z.value).collect::<Vec<_>>());
        let crossings = find_crossings(&ami.k_values, &rank_ami, &rank_acc)?;
        let zone = goldilocks_zone(&crossings, max_gap);
        Ok(GoldilocksReport {
            k_values: ami.k_values.clone(),
            z_ami,
            z_acc,
            rank_ami,
            rank_acc,
            crossings,
            zone,
            max_gap,
        })
    }

    pub fn is_crossing(&self, k: usize) -> bool {
        self.crossings.contains(&k)
    }
}
