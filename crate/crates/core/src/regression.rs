//! Cosine-difference diagnostics and the logistic model of classification success.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::corpus::cosine;
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(cos_correct, cos_best_incorrect, cos_correct - cos_best_incorrect)`.
pub fn cosine_features(
    bio: &[f32],
    name_embeddings: &[Vec<f64>],
    correct: usize,
) -> Result<(f64, f64, f64)> {
    if name_embeddings.len() < 2 {
        return Err(Error::UndefinedMetric(
            "cosine difference needs at least one incorrect name".into(),
        ));
    }
    if correct >= name_embeddings.len() {
        return Err(Error::Validation(format!(
            "correct index {correct} out of range for {} names",
            name_embeddings.len()
        )));
    }
    let cos_correct = cosine(bio, &name_embeddings[correct])?;
    let mut best = f64::NEG_INFINITY;
    for (j, emb) in name_embeddings.iter().enumerate() {
        if j != correct {
            best = best.max(cosine(bio, emb)?);
        }
    }
    Ok((cos_correct, best, cos_correct - best))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub cos_correct: f64,
    pub cos_incorrect: f64,
    pub interaction: f64,
    pub cluster_count: usize,
    pub dataset_tag: String,
    pub outcome: bool,
}

impl FeatureRow {
    pub fn new(
        cos_correct: f64,
        cos_incorrect: f64,
        cluster_count: usize,
        dataset_tag: impl Into<String>,
        outcome: bool,
    ) -> Self {
        FeatureRow {
            cos_correct,
            cos_incorrect,
            interaction: cos_correct * cos_incorrect,
            cluster_count,
            dataset_tag: dataset_tag.into(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub n_correct: usize,
    /// `None` for empty bins.
    pub proportion: Option<f64>,
}

impl Bin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedProportions {
    pub bins: Vec<Bin>,
    pub n_excluded: usize,
}

/// Proportion correct in half-open bins `[lo + i*width, lo + (i+1)*width)`.
pub fn bin_correct_proportions(
    diffs: &[f64],
    outcomes: &[bool],
    lo: f64,
    hi: f64,
    width: f64,
) -> Result<BinnedProportions> {
    if !(width > 0.0) || !(lo < hi) {
        return Err(Error::Config(format!(
            "invalid binning lo={lo} hi={hi} width={width}"
        )));
    }
    if diffs.len() != outcomes.len() {
        return Err(Error::DimensionMismatch {
            expected: diffs.len(),
            found: outcomes.len(),
        });
    }
    let n_bins = ((hi - lo) / width).round() as usize;
    let edge = |i: usize| lo + i as f64 * width;
    let mut n = vec![0usize; n_bins];
    let mut n_correct = vec![0usize; n_bins];
    let mut n_excluded = 0;
    for (&d, &ok) in diffs.iter().zip(outcomes) {
        if !(d >= lo && d < edge(n_bins)) {
            n_excluded += 1;
            continue;
        }
        let mut i = (((d - lo) / width).floor() as usize).min(n_bins - 1);
        while i > 0 && d < edge(i) {
            i -= 1;
        }
        while i + 1 < n_bins && d >= edge(i + 1) {
            i += 1;
        }
        n[i] += 1;
        n_correct[i] += usize::from(ok);
    }
    let bins = (0..n_bins)
        .map(|i| Bin {
            lo: edge(i),
            hi: edge(i + 1),
            n: n[i],
            n_correct: n_correct[i],
            proportion: (n[i] > 0).then(|| n_correct[i] as f64 / n[i] as f64),
        })
        .collect();
    Ok(BinnedProportions { bins, n_excluded })
}

pub const BASE_COLUMNS: [&str; 5] = [
    "intercept",
    "cos_correct",
    "cos_incorrect",
    "interaction",
    "cluster_count",
];

pub fn dummy_column(tag: &str) -> String {
    format!("dataset[{tag}]")
}

/// Design matrix with intercept, the four features and one dummy per
/// non-reference dataset (in sorted tag order).
#[derive(Debug, Clone)]
pub struct Design {
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub reference_dataset: String,
    pub dummy_datasets: Vec<String>,
}

impl Design {
    pub fn build(rows: &[FeatureRow], reference_dataset: &str) -> Result<Self> {
        let mut tags: Vec<String> = rows.iter().map(|r| r.dataset_tag.clone()).collect();
        tags.sort();
        tags.dedup();
        if !rows.is_empty() && !tags.iter().any(|t| t == reference_dataset) {
            return Err(Error::Config(format!(
                "reference dataset `{reference_dataset}` has no rows"
            )));
        }
        let dummy_datasets: Vec<String> =
            tags.into_iter().filter(|t| t != reference_dataset).collect();
        let mut columns: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
        columns.extend(dummy_datasets.iter().map(|t| dummy_column(t)));
        let p = columns.len();
        let x = DMatrix::from_fn(rows.len(), p, |i, j| {
            let r = &rows[i];
            match j {
                0 => 1.0,
                1 => r.cos_correct,
                2 => r.cos_incorrect,
                3 => r.interaction,
                4 => r.cluster_count as f64,
                _ => f64::from(u8::from(r.dataset_tag == dummy_datasets[j - 5])),
            }
        });
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| f64::from(u8::from(r.outcome))));
        Ok(Design {
            columns,
            x,
            y,
            reference_dataset: reference_dataset.to_string(),
            dummy_datasets,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegFit {
    pub columns: Vec<String>,
    pub coef: Vec<f64>,
    /// Row-major `p x p`.
    #[serde(with = "crate::serde_float::vec")]
    pub cov: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub std_err: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub z_values: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub p_values: Vec<f64>,
    pub n_obs: usize,
    pub converged: bool,
    pub n_iter: usize,
    #[serde(with = "crate::serde_float")]
    pub log_likelihood: f64,
    pub reference_dataset: String,
}

impl LogRegFit {
    /// A fit with known coefficients and no uncertainty, for prediction only.
    pub fn from_coefficients(columns: Vec<String>, coef: Vec<f64>, reference_dataset: &str) -> Result<Self> {
        if columns.len() != coef.len() {
            return Err(Error::DimensionMismatch {
                expected: columns.len(),
                found: coef.len(),
            });
        }
        let p = coef.len();
        Ok(LogRegFit {
            columns,
            coef,
            cov: vec![0.0; p * p],
            std_err: vec![f64::NAN; p],
            z_values: vec![f64::NAN; p],
            p_values: vec![f64::NAN; p],
            n_obs: 0,
            converged: true,
            n_iter: 0,
            log_likelihood: f64::NAN,
            reference_dataset: reference_dataset.to_string(),
        })
    }

    pub fn coefficient(&self, column: &str) -> Option<f64> {
        self.columns.iter().position(|c| c == column).map(|i| self.coef[i])
    }

    /// Covariate vector for `row` in this fit's column layout.
    pub fn features(&self, row: &FeatureRow) -> Result<Vec<f64>> {
        if self.columns.len() < BASE_COLUMNS.len()
            || self.columns[..BASE_COLUMNS.len()] != BASE_COLUMNS.map(String::from)
        {
            return Err(Error::Validation("fit does not use the standard feature layout".into()));
        }
        let mut x = vec![
            1.0,
            row.cos_correct,
            row.cos_incorrect,
            row.interaction,
            row.cluster_count as f64,
        ];
        let dummy = dummy_column(&row.dataset_tag);
        let known = row.dataset_tag == self.reference_dataset
            || self.columns[BASE_COLUMNS.len()..].contains(&dummy);
        if !known {
            return Err(Error::Validation(format!(
                "dataset `{}` is not part of the fitted layout",
                row.dataset_tag
            )));
        }
        x.extend(self.columns[BASE_COLUMNS.len()..].iter().map(|c| f64::from(u8::from(*c == dummy))));
        Ok(x)
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coef.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coef.len(),
                found: x.len(),
            });
        }
        Ok(self.coef.iter().zip(x).map(|(b, v)| b * v).sum())
    }

    pub fn table(&self) -> Vec<TableRow> {
        (0..self.coef.len())
            .map(|i| TableRow {
                variable: self.columns[i].clone(),
                coef: self.coef[i],
                std_err: self.std_err[i],
                z: self.z_values[i],
                p: self.p_values[i],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variable: String,
    pub coef: f64,
    #[serde(with = "crate::serde_float")]
    pub std_err: f64,
    #[serde(with = "crate::serde_float")]
    pub z: f64,
    #[serde(with = "crate::serde_float")]
    pub p: f64,
}

pub fn predict_prob(fit: &LogRegFit, row: &FeatureRow) -> Result<f64> {
    Ok(sigmoid(fit.linear_predictor(&fit.features(row)?)?))
}

pub fn log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| yi * e - softplus(e))
        .sum()
}

pub fn gradient(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y.iter()).map(|(&e, &yi)| yi - sigmoid(e)));
    x.tr_mul(&resid)
}

/// Negative Hessian of the log-likelihood, `X' W X`.
pub fn information(x: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let eta = x * beta;
    let mut xw = x.clone();
    for (i, &e) in eta.iter().enumerate() {
        let p = sigmoid(e);
        let w = p * (1.0 - p);
        xw.row_mut(i).scale_mut(w);
    }
    let h = x.tr_mul(&xw);
    (&h + h.transpose()) * 0.5
}

/// Columns that lie (numerically) in the span of the columns before them.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    let norms: Vec<f64> = (0..p).map(|j| x.column(j).norm()).collect();
    let gram = x.tr_mul(x);
    // Incremental Cholesky of the column-normalized Gram matrix; a vanishing
    // pivot means the column adds no new direction.
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..p {
        if norms[j] == 0.0 {
            dependent.push(j);
            continue;
        }
        let g = |a: usize, b: usize| gram[(a, b)] / (norms[a] * norms[b]);
        let mut row = vec![0.0; kept.len()];
        for (a, &ka) in kept.iter().enumerate() {
            let mut s = g(j, ka);
            for b in 0..a {
                s -= row[b] * l[(a, b)];
            }
            row[a] = s / l[(a, a)];
        }
        let pivot = 1.0 - row.iter().map(|v| v * v).sum::<f64>();
        if pivot < 1e-10 {
            dependent.push(j);
            continue;
        }
        let idx = kept.len();
        for (b, v) in row.into_iter().enumerate() {
            l[(idx, b)] = v;
        }
        l[(idx, idx)] = pivot.sqrt();
        kept.push(j);
    }
    dependent
}

pub const MAX_ITER: usize = 100;
pub const COEF_TOL: f64 = 1e-8;
pub const LOGLIK_TOL: f64 = 1e-10;
pub const SEPARATION_GUARD: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct NewtonFit {
    pub beta: DVector<f64>,
    /// Inverse observed information; NaN-filled when singular.
    pub cov: DMatrix<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub log_likelihood: f64,
}

/// Maximum-likelihood logistic regression by Newton / IRLS.
pub fn fit_design(x: &DMatrix<f64>, y: &DVector<f64>, columns: &[String]) -> Result<NewtonFit> {
    if columns.len() != x.ncols() || y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: columns.len(),
        });
    }
    let positives = y.iter().filter(|&&v| v > 0.5).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::Validation("logistic regression needs both outcomes".into()));
    }
    let dependent = dependent_columns(x);
    if !dependent.is_empty() {
        return Err(Error::RankDeficient {
            columns: dependent.into_iter().map(|j| columns[j].clone()).collect(),
        });
    }
    let p = x.ncols();
    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = log_likelihood(x, y, &beta);
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < MAX_ITER {
        n_iter += 1;
        let info = information(x, &beta);
        let Some(chol) = info.cholesky() else { break };
        let step = chol.solve(&gradient(x, y, &beta));
        let mut scale = 1.0;
        let (next, next_ll) = loop {
            let candidate = &beta + &step * scale;
            let cand_ll = log_likelihood(x, y, &candidate);
            if cand_ll >= ll - 1e-12 * ll.abs() || scale < 1e-4 {
                break (candidate, cand_ll);
            }
            scale *= 0.5;
        };
        let max_change = (&next - &beta).amax();
        let ll_change = (next_ll - ll).abs();
        beta = next;
        ll = next_ll;
        if beta.amax() > SEPARATION_GUARD {
            break;
        }
        if max_change < COEF_TOL || ll_change < LOGLIK_TOL {
            converged = true;
            break;
        }
    }
    let cov = information(x, &beta)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    Ok(NewtonFit {
        beta,
        cov,
        converged,
        n_iter,
        log_likelihood: ll,
    })
}

pub fn fit_logreg(rows: &[FeatureRow], reference_dataset: &str) -> Result<LogRegFit> {
    let design = Design::build(rows, reference_dataset)?;
    let NewtonFit {
        beta,
        cov,
        converged,
        n_iter,
        log_likelihood: ll,
    } = fit_design(&design.x, &design.y, &design.columns)?;
    let p = beta.len();
    let std_err: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let z_values: Vec<f64> = (0..p).map(|i| beta[i] / std_err[i]).collect();
    let p_values = z_values.iter().map(|z| erfc(z.abs() / std::f64::consts::SQRT_2)).collect();
    let mut cov_rows = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            cov_rows.push(cov[(i, j)]);
        }
    }
    Ok(LogRegFit {
        columns: design.columns,
        coef: beta.iter().copied().collect(),
        cov: cov_rows,
        std_err,
        z_values,
        p_values,
        n_obs: rows.len(),
        converged,
        n_iter,
        log_likelihood: ll,
        reference_dataset: reference_dataset.to_string(),
    })
}
