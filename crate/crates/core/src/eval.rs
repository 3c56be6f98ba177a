//! Evaluation metrics: cross-validated k-NN accuracy, affine-aligned R², and
//! Gaussian-process imputation of hidden entries.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dppca::gram_eigs;
use crate::kernels::{feature_matrix, kernel_matrix, SmKernelParams};
use crate::linalg::{least_squares, Cholesky, DenseMatrix, LinalgError, LowRankFactor};
use crate::mask::{MaskError, ObservationMask};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need more than {need} points, got {n}")]
    TooFewPoints { n: usize, need: usize },
    #[error("{labels} labels for {n} points")]
    LabelMismatch { n: usize, labels: usize },
    #[error("{what}: {left:?} vs {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("affine design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("mask hides no entries")]
    NoHiddenEntries,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("column {column}: observed kernel block is not positive definite")]
    NotPositiveDefinite { column: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Kernel(#[from] crate::kernels::KernelError),
    #[error(transparent)]
    Dppca(#[from] crate::dppca::DppcaError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One metric with its spread over repeats and an echo of its settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    /// `key=value` pairs joined by `;`.
    pub config: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "metric,value,stderr,config";

    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{}", self.metric, self.value, self.stderr, self.config)
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority label among the `k` training points nearest to `query`. Equal
/// distances keep training order; equal votes go to the smallest label.
fn knn_predict(x: &DenseMatrix, labels: &[i64], train: &[usize], query: &[f64], k: usize) -> i64 {
    let mut d: Vec<(f64, usize)> = train.iter().map(|&i| (sq_dist(x.row(i), query), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<i64, usize> = BTreeMap::new();
    for &(_, i) in d.iter().take(k) {
        *votes.entry(labels[i]).or_default() += 1;
    }
    let best = votes.values().copied().max().unwrap_or(0);
    votes
        .into_iter()
        .find(|&(_, v)| v == best)
        .map(|(l, _)| l)
        .expect("at least one vote")
}

/// Fold assignment: each class is shuffled, then its members are dealt
/// round-robin over the folds, continuing where the previous class stopped.
pub fn stratified_folds(labels: &[i64], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng_from_seed(seed);
    let mut out = vec![Vec::new(); folds];
    let mut slot = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            out[slot % folds].push(i);
            slot += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

fn check_labels(x: &DenseMatrix, labels: &[i64]) -> Result<()> {
    if labels.len() != x.rows() {
        return Err(EvalError::LabelMismatch {
            n: x.rows(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Mean k-NN accuracy over stratified folds; `stderr` is over folds.
pub fn knn_cv_accuracy(x: &DenseMatrix, labels: &[i64], k: usize, folds: usize, seed: u64) -> Result<EvalReport> {
    check_labels(x, labels)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if folds < 2 || x.rows() < folds {
        return Err(EvalError::TooFewPoints {
            n: x.rows(),
            need: folds.max(2) - 1,
        });
    }
    let split = stratified_folds(labels, folds, seed);
    let mut accs = Vec::with_capacity(folds);
    for test in &split {
        let train: Vec<usize> = (0..x.rows()).filter(|i| test.binary_search(i).is_err()).collect();
        let hits = test
            .iter()
            .filter(|&&i| knn_predict(x, labels, &train, x.row(i), k) == labels[i])
            .count();
        accs.push(hits as f64 / test.len() as f64);
    }
    let (value, stderr) = mean_stderr(&accs);
    Ok(EvalReport {
        metric: "knn_accuracy".into(),
        value,
        stderr,
        config: format!("k={k};folds={folds};seed={seed}"),
    })
}

/// Training-set accuracy: every point is classified with all points as the
/// reference set (itself included).
pub fn knn_self_accuracy(x: &DenseMatrix, labels: &[i64], k: usize) -> Result<f64> {
    check_labels(x, labels)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let all: Vec<usize> = (0..x.rows()).collect();
    let hits = all
        .iter()
        .filter(|&&i| knn_predict(x, labels, &all, x.row(i), k) == labels[i])
        .count();
    Ok(hits as f64 / x.rows().max(1) as f64)
}

/// `1 − ‖X_true − [X_est, 1]A‖²_F / ‖X_true − mean‖²_F` for the least-squares
/// `A`; residuals are pooled over output columns.
pub fn affine_r2(x_est: &DenseMatrix, x_true: &DenseMatrix) -> Result<f64> {
    let (n, q) = x_est.shape();
    if x_true.rows() != n {
        return Err(EvalError::ShapeMismatch {
            what: "affine_r2 rows",
            left: x_est.shape(),
            right: x_true.shape(),
        });
    }
    if n <= q + 1 {
        return Err(EvalError::TooFewPoints { n, need: q + 1 });
    }
    let design = DenseMatrix::from_fn(n, q + 1, |r, c| if c < q { x_est[(r, c)] } else { 1.0 });
    let coef = match least_squares(&design, x_true) {
        Ok(c) => c,
        Err(LinalgError::RankDeficient(_)) => return Err(EvalError::RankDeficientDesign),
        Err(e) => return Err(e.into()),
    };
    let fit = design.matmul(&coef)?;
    let ss_res: f64 = fit
        .as_slice()
        .iter()
        .zip(x_true.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mut ss_tot = 0.0;
    for c in 0..x_true.cols() {
        let col = x_true.col(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        ss_tot += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Top-`q` principal component scores of the column-centered data.
pub fn pca_latents(y: &DenseMatrix, q: usize) -> Result<DenseMatrix> {
    let (n, m) = y.shape();
    let means: Vec<f64> = (0..m).map(|c| (0..n).map(|r| y[(r, c)]).sum::<f64>() / n as f64).collect();
    let centered = DenseMatrix::from_fn(n, m, |r, c| y[(r, c)] - means[c]);
    let eig = gram_eigs(&centered)?;
    Ok(DenseMatrix::from_fn(n, q.min(n), |r, c| {
        eig.vectors[(r, c)] * (eig.values[c].max(0.0) * m as f64).sqrt()
    }))
}

fn check_mask(y: &DenseMatrix, mask: &ObservationMask) -> Result<()> {
    mask.check_shape(y.rows(), y.cols())?;
    mask.check_columns()?;
    Ok(())
}

/// Jitter added once to a kernel block before reporting failure.
pub const IMPUTE_JITTER: f64 = 1e-8;

/// GP posterior mean of each hidden entry,
/// `K_{miss,obs} (K_{obs,obs} + σ²I)⁻¹ y_obs`, with the exact SM kernel at
/// `x_hat`. Observed entries are copied through unchanged.
pub fn impute_posterior_mean(
    y: &DenseMatrix,
    mask: &ObservationMask,
    x_hat: &DenseMatrix,
    params: &SmKernelParams,
) -> Result<DenseMatrix> {
    check_mask(y, mask)?;
    if x_hat.rows() != y.rows() {
        return Err(EvalError::ShapeMismatch {
            what: "latents",
            left: x_hat.shape(),
            right: y.shape(),
        });
    }
    let sigma2 = params.sigma2();
    let k = kernel_matrix(x_hat, params);
    let mut out = y.clone();
    for c in 0..y.cols() {
        let miss = mask.hidden_rows(c);
        if miss.is_empty() {
            continue;
        }
        let obs = mask.observed_rows(c);
        let mut koo = DenseMatrix::from_fn(obs.len(), obs.len(), |i, j| k[(obs[i], obs[j])]);
        koo.add_diag(sigma2);
        let chol = match Cholesky::new(&koo) {
            Ok(ch) => ch,
            Err(_) => {
                koo.add_diag(IMPUTE_JITTER);
                Cholesky::new(&koo).map_err(|_| EvalError::NotPositiveDefinite { column: c })?
            }
        };
        let y_obs: Vec<f64> = obs.iter().map(|&r| y[(r, c)]).collect();
        let alpha = chol.solve_vec(&y_obs)?;
        for &r in &miss {
            out[(r, c)] = obs.iter().zip(&alpha).map(|(&o, a)| k[(r, o)] * a).sum();
        }
    }
    Ok(out)
}

/// Monte-Carlo variant of [`impute_posterior_mean`]: the posterior mean
/// under the random-feature kernel `ΦΦᵀ`, averaged over `samples` spectral
/// draws.
pub fn impute_posterior_mean_mc(
    y: &DenseMatrix,
    mask: &ObservationMask,
    x_hat: &DenseMatrix,
    params: &SmKernelParams,
    features: usize,
    samples: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    check_mask(y, mask)?;
    let sigma2 = params.sigma2();
    let mut acc = DenseMatrix::zeros(y.rows(), y.cols());
    for s in 0..samples.max(1) {
        let sample = crate::kernels::sample_spectral_points(params, features, derive_seed(seed, s as u64))?;
        let phi = feature_matrix(x_hat, &sample, params)?;
        for c in 0..y.cols() {
            let miss = mask.hidden_rows(c);
            if miss.is_empty() {
                continue;
            }
            let obs = mask.observed_rows(c);
            let phi_o = phi.select_rows(&obs);
            let y_obs: Vec<f64> = obs.iter().map(|&r| y[(r, c)]).collect();
            // Φ_m Φ_oᵀ C⁻¹ y_o = Φ_m (σ²I + Φ_oᵀΦ_o)⁻¹ Φ_oᵀ y_o
            let factor = LowRankFactor::new(&phi_o, sigma2)?;
            let mut t = phi_o.t_matvec(&y_obs)?;
            factor.chol.forward_in_place(&mut t);
            factor.chol.backward_in_place(&mut t);
            for &r in &miss {
                let v: f64 = phi.row(r).iter().zip(&t).map(|(a, b)| a * b).sum();
                acc[(r, c)] += v / sigma2;
            }
        }
    }
    let inv = 1.0 / samples.max(1) as f64;
    let mut out = y.clone();
    for c in 0..y.cols() {
        for r in mask.hidden_rows(c) {
            out[(r, c)] = acc[(r, c)] * inv;
        }
    }
    Ok(out)
}

/// Per-column observed mean written into every hidden entry.
pub fn mean_imputation(y: &DenseMatrix, mask: &ObservationMask) -> Result<DenseMatrix> {
    check_mask(y, mask)?;
    let mut out = y.clone();
    for c in 0..y.cols() {
        let obs = mask.observed_rows(c);
        let mean = obs.iter().map(|&r| y[(r, c)]).sum::<f64>() / obs.len() as f64;
        for r in mask.hidden_rows(c) {
            out[(r, c)] = mean;
        }
    }
    Ok(out)
}

/// Mean squared error over the hidden entries only.
pub fn imputation_mse(y_imputed: &DenseMatrix, y_truth: &DenseMatrix, mask: &ObservationMask) -> Result<f64> {
    if y_imputed.shape() != y_truth.shape() {
        return Err(EvalError::ShapeMismatch {
            what: "imputed vs truth",
            left: y_imputed.shape(),
            right: y_truth.shape(),
        });
    }
    mask.check_shape(y_truth.rows(), y_truth.cols())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..y_truth.rows() {
        for c in 0..y_truth.cols() {
            if !mask.is_observed(r, c) {
                let d = y_imputed[(r, c)] - y_truth[(r, c)];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(EvalError::NoHiddenEntries);
    }
    Ok(sum / count as f64)
}
