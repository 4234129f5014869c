//! Accuracy, entropy, mutual information, adjusted mutual information and
//! the information-theoretic complexity of a naming policy.
//!
//! Logarithms are natural unless a function says otherwise. Sums of
//! log-terms are accumulated in ascending order of magnitude with
//! compensation so results do not depend on table layout.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::llm::ClassificationRecord;

/// Compensated sum, smallest magnitudes first.
pub fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoUnit {
    Nats,
    Bits,
}

impl InfoUnit {
    fn scale(self) -> f64 {
        match self {
            InfoUnit::Nats => 1.0,
            InfoUnit::Bits => std::f64::consts::LN_2.recip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged contingency table".into()));
        }
        let row_sums: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..cols).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total: u64 = row_sums.iter().sum();
        if total == 0 {
            return Err(Error::Validation("contingency table has no observations".into()));
        }
        Ok(ContingencyTable {
            counts,
            row_sums,
            col_sums,
            total,
        })
    }

    /// Rows index the distinct values of `a`, columns those of `b`, both in
    /// first-seen order.
    pub fn from_labels<A, B>(a: &[A], b: &[B]) -> Result<Self>
    where
        A: Eq + Hash + Clone,
        B: Eq + Hash + Clone,
    {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        let ra = dense_codes(a);
        let rb = dense_codes(b);
        let rows = ra.iter().max().map_or(0, |m| m + 1);
        let cols = rb.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (&i, &j) in ra.iter().zip(&rb) {
            counts[i][j] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// True when both labelings induce the same set partition.
    pub fn is_bijective(&self) -> bool {
        let one_per_row = self
            .counts
            .iter()
            .all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
        let one_per_col = (0..self.col_sums.len())
            .all(|j| self.counts.iter().filter(|r| r[j] > 0).count() == 1);
        one_per_row && one_per_col
    }
}

fn dense_codes<T: Eq + Hash + Clone>(labels: &[T]) -> Vec<usize> {
    let mut seen: HashMap<T, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = seen.len();
            *seen.entry(l.clone()).or_insert(next)
        })
        .collect()
}

fn entropy_of_counts(counts: &[u64], unit: InfoUnit) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let terms = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    stable_sum(terms) * unit.scale()
}

/// Empirical Shannon entropy of a labeling, in nats.
pub fn entropy<T: Eq + Hash + Clone>(labels: &[T]) -> f64 {
    let codes = dense_codes(labels);
    let mut counts = vec![0u64; codes.iter().max().map_or(0, |m| m + 1)];
    for c in codes {
        counts[c] += 1;
    }
    entropy_of_counts(&counts, InfoUnit::Nats)
}

fn mi_in(table: &ContingencyTable, unit: InfoUnit) -> f64 {
    let n = table.total as f64;
    let mut terms = Vec::new();
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            let ab = table.row_sums[i] as f64 * table.col_sums[j] as f64;
            terms.push(c / n * (c * n / ab).ln());
        }
    }
    (stable_sum(terms) * unit.scale()).max(0.0)
}

pub fn mutual_information(table: &ContingencyTable) -> f64 {
    mi_in(table, InfoUnit::Nats)
}

/// `ln k!` for `k = 0..=n`.
fn log_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn emi_in(table: &ContingencyTable, unit: InfoUnit) -> f64 {
    let n = table.total;
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut terms = Vec::new();
    for &a in &table.row_sums {
        for &b in &table.col_sums {
            if a == 0 || b == 0 {
                continue;
            }
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = lf[a as usize] + lf[b as usize] + lf[(n - a) as usize]
                + lf[(n - b) as usize]
                - lf[n as usize];
            for nij in lo..=hi {
                let log_p = fixed
                    - lf[nij as usize]
                    - lf[(a - nij) as usize]
                    - lf[(b - nij) as usize]
                    - lf[(n + nij - a - b) as usize];
                let x = nij as f64;
                let mi_term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                terms.push(mi_term * log_p.exp());
            }
        }
    }
    stable_sum(terms) * unit.scale()
}

/// Expected MI under the fixed-marginals permutation (hypergeometric) model, in nats.
pub fn expected_mi(table: &ContingencyTable) -> f64 {
    emi_in(table, InfoUnit::Nats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmiParts {
    pub mi: f64,
    pub emi: f64,
    pub h_a: f64,
    pub h_b: f64,
}

pub fn ami_parts(table: &ContingencyTable, unit: InfoUnit) -> AmiParts {
    AmiParts {
        mi: mi_in(table, unit),
        emi: emi_in(table, unit),
        h_a: entropy_of_counts(&table.row_sums, unit),
        h_b: entropy_of_counts(&table.col_sums, unit),
    }
}

/// `(MI - E[MI]) / (mean(H_a, H_b) - E[MI])`.
///
/// When the denominator vanishes (both labelings trivial, or equivalent
/// degenerate cases) the result is 1 for identical partitions and 0 otherwise.
pub fn ami_from_table(table: &ContingencyTable, unit: InfoUnit) -> f64 {
    let p = ami_parts(table, unit);
    let denom = 0.5 * (p.h_a + p.h_b) - p.emi;
    if denom.abs() < 1e-12 {
        return if table.is_bijective() { 1.0 } else { 0.0 };
    }
    (p.mi - p.emi) / denom
}

pub fn ami<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash + Clone,
    B: Eq + Hash + Clone,
{
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::UndefinedMetric("AMI of empty labelings".into()));
    }
    Ok(ami_from_table(&ContingencyTable::from_labels(a, b)?, InfoUnit::Nats))
}

/// `C / T` over records that reached the provider.
pub fn accuracy(records: &[ClassificationRecord]) -> Result<f64> {
    let scored: Vec<&ClassificationRecord> =
        records.iter().filter(|r| !r.is_provider_error()).collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric(
            "accuracy with no successfully classified records".into(),
        ));
    }
    let correct = scored.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Cluster prior `p(m)` with a naming distribution `q(w|m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPolicy {
    p_m: Vec<f64>,
    q_w_given_m: Vec<Vec<f64>>,
    q_w: Vec<f64>,
}

impl EncoderPolicy {
    pub fn new(p_m: Vec<f64>, q_w_given_m: Vec<Vec<f64>>) -> Result<Self> {
        const TOL: f64 = 1e-9;
        if p_m.is_empty() || p_m.len() != q_w_given_m.len() {
            return Err(Error::Validation(
                "encoder policy needs one q(w|m) row per cluster".into(),
            ));
        }
        let w = q_w_given_m[0].len();
        let simplex = |v: &[f64]| {
            v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() <= TOL
        };
        if !simplex(&p_m) {
            return Err(Error::Validation("p(m) is not a probability vector".into()));
        }
        for (m, row) in q_w_given_m.iter().enumerate() {
            if row.len() != w || !simplex(row) {
                return Err(Error::Validation(format!("q(w|m={m}) is not a probability vector")));
            }
        }
        let q_w = (0..w)
            .map(|j| p_m.iter().zip(&q_w_given_m).map(|(p, row)| p * row[j]).sum())
            .collect();
        Ok(EncoderPolicy {
            p_m,
            q_w_given_m,
            q_w,
        })
    }

    /// One word per cluster; `words[m]` indexes the word used for cluster `m`.
    pub fn deterministic(p_m: Vec<f64>, words: &[usize]) -> Result<Self> {
        let w = words.iter().max().map_or(0, |m| m + 1);
        let rows = words
            .iter()
            .map(|&j| {
                let mut row = vec![0.0; w];
                row[j] = 1.0;
                row
            })
            .collect();
        Self::new(p_m, rows)
    }

    /// Prior from the empirical label frequencies over `k` clusters and the
    /// deterministic encoder induced by `names` (equal names share a word).
    pub fn from_clustering(labels: &[usize], k: usize, names: &[String]) -> Result<Self> {
        if labels.is_empty() || names.len() != k {
            return Err(Error::Validation(format!(
                "need labels and {k} names, got {} names",
                names.len()
            )));
        }
        let mut counts = vec![0u64; k];
        for &l in labels {
            if l >= k {
                return Err(Error::Validation(format!("label {l} out of range for K={k}")));
            }
            counts[l] += 1;
        }
        let n = labels.len() as f64;
        let p_m = counts.iter().map(|&c| c as f64 / n).collect();
        let words = dense_codes(names);
        Self::deterministic(p_m, &words)
    }

    pub fn p_m(&self) -> &[f64] {
        &self.p_m
    }

    pub fn q_w_given_m(&self) -> &[Vec<f64>] {
        &self.q_w_given_m
    }

    pub fn q_w(&self) -> &[f64] {
        &self.q_w
    }
}

/// `I_q = sum_{m,w} p(m) q(w|m) log2(q(w|m) / q(w))`, in bits.
pub fn encoder_complexity(policy: &EncoderPolicy) -> f64 {
    let mut terms = Vec::new();
    for (p, row) in policy.p_m.iter().zip(&policy.q_w_given_m) {
        for (q, qw) in row.iter().zip(&policy.q_w) {
            let mass = p * q;
            if mass > 0.0 {
                terms.push(mass * (q / qw).log2());
            }
        }
    }
    stable_sum(terms).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[&[u64]]) -> ContingencyTable {
        ContingencyTable::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[3, 3, 3]), 0.0);
        assert!((entropy(&[0, 1, 0, 1]) - 2f64.ln()).abs() < 1e-9);
        assert!((entropy(&[0, 1, 2, 3, 3, 2, 1, 0]) - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mi_examples() {
        assert!((mutual_information(&table(&[&[5, 0], &[0, 5]])) - 2f64.ln()).abs() < 1e-9);
        assert!(mutual_information(&table(&[&[4, 4], &[4, 4]])).abs() < 1e-12);
        let expected = 2.0 / 3.0 * 1.5f64.ln() + 1.0 / 3.0 * 3f64.ln();
        assert!((mutual_information(&table(&[&[2, 0], &[0, 1]])) - expected).abs() < 1e-9);
    }

    #[test]
    fn emi_single_cell_and_marginal_only() {
        assert_eq!(expected_mi(&table(&[&[7]])), 0.0);
        let a = expected_mi(&table(&[&[3, 0], &[0, 3]]));
        let b = expected_mi(&table(&[&[0, 3], &[3, 0]]));
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn ami_identity_and_relabel() {
        let a = [0, 0, 1, 1, 2, 2, 2, 0];
        let renamed = [5, 5, 9, 9, 1, 1, 1, 5];
        assert!((ami(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ami(&a, &renamed).unwrap() - 1.0).abs() < 1e-12);
        assert!(ami(&a, &renamed[..3]).is_err());
    }

    #[test]
    fn ami_degenerate_denominator() {
        assert_eq!(ami(&[1, 1, 1], &[4, 4, 4]).unwrap(), 1.0);
        // one trivial labeling against a non-trivial one
        assert_eq!(ami(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn ami_is_below_one_for_partial_agreement() {
        let a = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let b = [0, 0, 1, 1, 1, 2, 2, 2, 0];
        let v = ami(&a, &b).unwrap();
        assert!(v < 1.0 && v > -1.0, "{v}");
    }

    #[test]
    fn accuracy_examples() {
        use crate::llm::ClassificationRecord;
        let rec = |correct| ClassificationRecord::scored_for_test(correct);
        let mut records: Vec<_> = (0..750).map(|_| rec(true)).collect();
        records.extend((0..250).map(|_| rec(false)));
        assert_eq!(accuracy(&records).unwrap(), 0.75);
        assert_eq!(accuracy(&[rec(true), rec(true)]).unwrap(), 1.0);
        assert_eq!(accuracy(&vec![rec(false); 5]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn complexity_examples() {
        let uniform4 = EncoderPolicy::deterministic(vec![0.25; 4], &[0, 1, 2, 3]).unwrap();
        assert!((encoder_complexity(&uniform4) - 2.0).abs() < 1e-9);
        let shared = EncoderPolicy::deterministic(vec![0.25; 4], &[0, 0, 0, 0]).unwrap();
        assert_eq!(encoder_complexity(&shared), 0.0);
        let noisy =
            EncoderPolicy::new(vec![0.5, 0.5], vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        // direct summation: 2 * 0.5 * (0.9 log2 1.8 + 0.1 log2 0.2)
        let oracle = 0.9 * 1.8f64.log2() + 0.1 * 0.2f64.log2();
        assert!((encoder_complexity(&noisy) - oracle).abs() < 1e-12);
        assert!((encoder_complexity(&noisy) - 0.5310).abs() < 1e-4);
    }

    #[test]
    fn policy_validation() {
        assert!(EncoderPolicy::new(vec![0.5, 0.6], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(EncoderPolicy::new(vec![1.0], vec![vec![0.5, 0.4]]).is_err());
        let p = EncoderPolicy::new(vec![0.2, 0.8], vec![vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!((p.q_w()[0] - 0.9).abs() < 1e-12);
    }

    fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..5, n),
                prop::collection::vec(0usize..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ami_symmetric_and_bounded((a, b) in labels_strategy()) {
            let ab = ami(&a, &b).unwrap();
            let ba = ami(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
        }

        #[test]
        fn mi_matches_entropy_identity((a, b) in labels_strategy()) {
            let joint: Vec<(usize, usize)> = a.iter().copied().zip(b.iter().copied()).collect();
            let t = ContingencyTable::from_labels(&a, &b).unwrap();
            let lhs = mutual_information(&t);
            let rhs = entropy(&a) + entropy(&b) - entropy(&joint);
            prop_assert!((lhs - rhs.max(0.0)).abs() < 1e-9);
        }

        #[test]
        fn ami_unit_invariant((a, b) in labels_strategy()) {
            let t = ContingencyTable::from_labels(&a, &b).unwrap();
            let nats = ami_from_table(&t, InfoUnit::Nats);
            let bits = ami_from_table(&t, InfoUnit::Bits);
            prop_assert!((nats - bits).abs() < 1e-12);
        }

        #[test]
        fn deterministic_complexity_is_word_entropy(
            weights in prop::collection::vec(1u32..50, 1..8),
            words in prop::collection::vec(0usize..4, 8),
        ) {
            let total: u32 = weights.iter().sum();
            let p: Vec<f64> = weights.iter().map(|&w| f64::from(w) / f64::from(total)).collect();
            let words = &words[..p.len()];
            let policy = EncoderPolicy::deterministic(p.clone(), words).unwrap();
            let h2 = stable_sum(
                policy.q_w().iter().filter(|&&q| q > 0.0).map(|&q| -q * q.log2()).collect(),
            );
            prop_assert!((encoder_complexity(&policy) - h2).abs() < 1e-9);
        }
    }
}
