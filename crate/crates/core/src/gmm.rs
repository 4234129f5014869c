//! Diagonal-covariance Gaussian mixtures fitted by expectation–maximization.
//!
//! Fits are pure functions of `(X, K, seed, config)`: initialization is
//! k-means++ on a seeded ChaCha stream, the E-step is evaluated per point in
//! parallel, and every reduction runs in a fixed order, so two fits with the
//! same inputs are bit-identical regardless of thread count.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::checksum_bytes;
use crate::error::{Error, Result};
use crate::seed::substream;

pub const MODEL_FORMAT: &str = "kzone-gmm/1";

/// Components whose total responsibility falls below this are treated as empty.
const EMPTY_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
    pub n_restarts: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            tol: 1e-5,
            max_iter: 200,
            var_floor: 1e-6,
            n_restarts: 1,
        }
    }
}

/// A component that went empty and was re-seeded from a data point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reseed {
    pub iteration: usize,
    pub component: usize,
    pub point: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    pub final_loglik: f64,
    pub seed: u64,
    pub n_iter: usize,
    pub config: GmmConfig,
    /// Log-likelihood before each M-step, then once more for the final parameters.
    pub trace: Vec<f64>,
    pub reseeds: Vec<Reseed>,
    /// Mean responsibilities of the last E-step (the final M-step's weights).
    pub last_resp_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub responsibilities: Option<Array2<f64>>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Checks EM monotonicity over the trace, skipping transitions where a
    /// component was re-seeded.
    pub fn trace_is_monotone(&self, slack: f64) -> bool {
        self.trace.windows(2).enumerate().all(|(t, w)| {
            let reseeded = self.reseeds.iter().any(|r| r.iteration == t);
            reseeded || w[1] >= w[0] - slack
        })
    }
}

fn validate(x: ArrayView2<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if x.nrows() < k {
        return Err(Error::Config(format!(
            "need at least K={k} points, got {}",
            x.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("data matrix has non-finite entries".into()));
    }
    Ok(())
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// k-means++ seeding: first centre uniform, the rest by squared-distance weighting.
pub fn kmeanspp_init(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    validate(x, k)?;
    let mut rng = substream(seed, u64::MAX);
    Ok(kmeanspp_with(x, k, &mut rng))
}

fn kmeanspp_with<R: Rng>(x: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = dist
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(d, _)| *d)
            .sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in 0..n {
                if taken[i] || dist[i] <= 0.0 {
                    continue;
                }
                acc += dist[i];
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a candidate")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        taken[pick] = true;
        for i in 0..n {
            let d = sq_dist(x.row(i), x.row(pick));
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    let mut means = Array2::zeros((k, x.ncols()));
    for (c, &i) in chosen.iter().enumerate() {
        means.row_mut(c).assign(&x.row(i));
    }
    means
}

fn column_variances(x: ArrayView2<f64>, floor: f64) -> Array1<f64> {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        for (j, v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.mapv(|s: f64| (s / n).max(floor))
}

struct Params {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
}

/// Per-point, per-component `log w_k + log N(x | mu_k, var_k)`.
fn log_joint(p: &Params, x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let k = p.weights.len();
    let consts: Vec<f64> = (0..k)
        .map(|c| {
            let log_det: f64 = p.variances.row(c).iter().map(|v| v.ln()).sum();
            p.weights[c].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det)
        })
        .collect();
    let inv_var = p.variances.mapv(|v| 1.0 / v);
    let mut out = vec![0.0; n * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for c in 0..k {
            let mu = p.means.row(c);
            let iv = inv_var.row(c);
            let mut q = 0.0;
            for j in 0..d {
                let diff = xi[j] - mu[j];
                q += diff * diff * iv[j];
            }
            row[c] = consts[c] - 0.5 * q;
        }
    });
    Array2::from_shape_vec((n, k), out).expect("shape matches")
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Responsibilities (row-normalized in place) and the total log-likelihood.
fn e_step(p: &Params, x: ArrayView2<f64>) -> (Array2<f64>, f64) {
    let mut lj = log_joint(p, x);
    let mut total = 0.0;
    for mut row in lj.rows_mut() {
        let lse = log_sum_exp(row.view());
        total += lse;
        row.mapv_inplace(|v| (v - lse).exp());
    }
    (lj, total)
}

fn m_step(
    p: &mut Params,
    x: ArrayView2<f64>,
    resp: &Array2<f64>,
    cfg: &GmmConfig,
    global_var: &Array1<f64>,
    iteration: usize,
    reseeds: &mut Vec<Reseed>,
) -> bool {
    let (n, d) = x.dim();
    let k = resp.ncols();
    let mass = resp.sum_axis(Axis(0));
    let sums = resp.t().dot(&x);
    let mut reseeded = false;
    let mut used = Vec::new();
    for c in 0..k {
        if mass[c] < EMPTY_MASS {
            // lowest max-responsibility point not already used this step
            let point = (0..n)
                .filter(|i| !used.contains(i))
                .min_by(|&a, &b| {
                    let ma = resp.row(a).iter().copied().fold(0.0, f64::max);
                    let mb = resp.row(b).iter().copied().fold(0.0, f64::max);
                    ma.partial_cmp(&mb).expect("finite responsibilities")
                })
                .expect("n >= K leaves a candidate");
            used.push(point);
            p.means.row_mut(c).assign(&x.row(point));
            p.variances.row_mut(c).assign(global_var);
            p.weights[c] = 1.0 / n as f64;
            reseeds.push(Reseed {
                iteration,
                component: c,
                point,
            });
            reseeded = true;
            continue;
        }
        p.weights[c] = mass[c] / n as f64;
        let mean = sums.row(c).mapv(|s| s / mass[c]);
        p.means.row_mut(c).assign(&mean);
    }
    let updated: Vec<Array1<f64>> = (0..k)
        .into_par_iter()
        .map(|c| {
            if mass[c] < EMPTY_MASS {
                return p.variances.row(c).to_owned();
            }
            let mu = p.means.row(c);
            let mut acc = Array1::<f64>::zeros(d);
            for i in 0..n {
                let r = resp[[i, c]];
                if r == 0.0 {
                    continue;
                }
                let xi = x.row(i);
                for j in 0..d {
                    let diff = xi[j] - mu[j];
                    acc[j] += r * diff * diff;
                }
            }
            acc.mapv(|s| (s / mass[c]).max(cfg.var_floor))
        })
        .collect();
    for (c, v) in updated.into_iter().enumerate() {
        p.variances.row_mut(c).assign(&v);
    }
    if reseeded {
        let total = p.weights.sum();
        p.weights.mapv_inplace(|w| w / total);
    }
    reseeded
}

fn fit_once(x: ArrayView2<f64>, k: usize, seed: u64, restart: usize, cfg: &GmmConfig) -> GmmModel {
    let mut rng = substream(seed, restart as u64);
    let global_var = column_variances(x, cfg.var_floor);
    let means = kmeanspp_with(x, k, &mut rng);
    let mut variances = Array2::zeros((k, x.ncols()));
    for mut row in variances.rows_mut() {
        row.assign(&global_var);
    }
    let mut params = Params {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means,
        variances,
    };
    let mut trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut last_resp_means = vec![1.0 / k as f64; k];
    let mut n_iter = 0;
    for it in 0..cfg.max_iter.max(1) {
        let (resp, ll) = e_step(&params, x);
        last_resp_means = resp.mean_axis(Axis(0)).expect("n >= 1").to_vec();
        let prev = trace.last().copied();
        trace.push(ll);
        let reseeded = m_step(&mut params, x, &resp, cfg, &global_var, it, &mut reseeds);
        n_iter = it + 1;
        if let Some(prev) = prev {
            let recently_reseeded = reseeds.iter().any(|r| r.iteration + 1 == it);
            if !reseeded && !recently_reseeded && (ll - prev) <= cfg.tol * prev.abs() {
                break;
            }
        }
    }
    let (_, final_loglik) = e_step(&params, x);
    trace.push(final_loglik);
    GmmModel {
        weights: params.weights,
        means: params.means,
        variances: params.variances,
        final_loglik,
        seed,
        n_iter,
        config: *cfg,
        trace,
        reseeds,
        last_resp_means,
    }
}

/// Best of `n_restarts` EM runs by final log-likelihood (earliest restart wins ties).
pub fn fit_gmm(x: ArrayView2<f64>, k: usize, seed: u64, cfg: &GmmConfig) -> Result<GmmModel> {
    validate(x, k)?;
    if !(cfg.var_floor > 0.0) {
        return Err(Error::Config("var_floor must be positive".into()));
    }
    let mut best: Option<GmmModel> = None;
    for restart in 0..cfg.n_restarts.max(1) {
        let model = fit_once(x, k, seed, restart, cfg);
        if best
            .as_ref()
            .is_none_or(|b| model.final_loglik > b.final_loglik)
        {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn params_of(model: &GmmModel) -> Params {
    Params {
        weights: model.weights.clone(),
        means: model.means.clone(),
        variances: model.variances.clone(),
    }
}

fn check_dim(model: &GmmModel, x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: x.ncols(),
        });
    }
    Ok(())
}

/// Hard labels by maximum posterior; ties go to the lowest component index.
pub fn predict(model: &GmmModel, x: ArrayView2<f64>) -> Result<Assignment> {
    check_dim(model, x)?;
    let (resp, _) = e_step(&params_of(model), x);
    let labels = resp
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(Assignment {
        labels,
        responsibilities: Some(resp),
    })
}

pub fn log_likelihood(model: &GmmModel, x: ArrayView2<f64>) -> Result<f64> {
    check_dim(model, x)?;
    let lj = log_joint(&params_of(model), x);
    Ok(lj.rows().into_iter().map(log_sum_exp).sum())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    k: usize,
    d: usize,
    seed: u64,
    config: GmmConfig,
    final_loglik: f64,
    n_iter: usize,
    trace: Vec<f64>,
    reseeds: Vec<Reseed>,
    last_resp_means: Vec<f64>,
    payload_bytes: usize,
    payload_checksum: String,
}

/// One JSON header line, then weights, means and variances as little-endian `f64`.
pub fn write_model(path: impl AsRef<Path>, model: &GmmModel) -> Result<()> {
    let path = path.as_ref();
    let payload: Vec<u8> = model
        .weights
        .iter()
        .chain(model.means.iter())
        .chain(model.variances.iter())
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        k: model.k(),
        d: model.dim(),
        seed: model.seed,
        config: model.config,
        final_loglik: model.final_loglik,
        n_iter: model.n_iter,
        trace: model.trace.clone(),
        reseeds: model.reseeds.clone(),
        last_resp_means: model.last_resp_means.clone(),
        payload_bytes: payload.len(),
        payload_checksum: checksum_bytes(&payload),
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<GmmModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header line".into(),
        })?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let payload = &bytes[split + 1..];
    if payload.len() != header.payload_bytes || checksum_bytes(payload) != header.payload_checksum {
        return Err(Error::Integrity(format!(
            "model payload in {} does not match its header",
            path.display()
        )));
    }
    let (k, d) = (header.k, header.d);
    if payload.len() != (k + 2 * k * d) * 8 {
        return Err(Error::Integrity("model payload length inconsistent with K, d".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let weights = Array1::from(values[..k].to_vec());
    let means = Array2::from_shape_vec((k, d), values[k..k + k * d].to_vec()).expect("shape");
    let variances = Array2::from_shape_vec((k, d), values[k + k * d..].to_vec()).expect("shape");
    Ok(GmmModel {
        weights,
        means,
        variances,
        final_loglik: header.final_loglik,
        seed: header.seed,
        n_iter: header.n_iter,
        config: header.config,
        trace: header.trace,
        reseeds: header.reseeds,
        last_resp_means: header.last_resp_means,
    })
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(out, "{l}").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse().map_err(|e: std::num::ParseIntError| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
