//! Closed-form landscape of the linear-kernel GPLVM (dual probabilistic PCA).
//!
//! With `k(x, x') = xᵀx'` the marginal likelihood of `Y` is
//!
//! ```text
//! L(X, σ²) = −M/2 · (N log 2π + log|K|) − ½ tr(K⁻¹ YYᵀ),   K = XXᵀ + σ²I.
//! ```
//!
//! Every stationary point has the form `X̂ = U_Q (Λ_Q − σ²I)^{1/2} R`, where
//! `U_Q` holds `Q` eigenvectors of `S = YYᵀ/M`, `Λ_Q` the matching
//! eigenvalues (or `σ²` for a zero column), and `R` is any orthogonal matrix.
//! Which eigenvalues are kept, relative to `σ²`, decides whether `X̂` is a
//! maximum, a saddle, or a collapsed solution with zero columns.
//!
//! ```
//! use gplvm::dppca::{classify_regime, Regime};
//!
//! let eigvals = [5.0, 4.0, 3.0, 2.0, 1.0];
//! let r = classify_regime(&eigvals, 3.5, 3);
//! assert_eq!(r.regime, Regime::ZeroColumns(1));
//! assert_eq!(classify_regime(&eigvals, 6.0, 3).predicted_zero_cols, 3);
//! ```

use std::fmt;

use thiserror::Error;

use crate::likelihood::{LikelihoodError, LowRankLoglik};
use crate::linalg::{sym_eig, Cholesky, DenseMatrix, EigenDecomposition, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DppcaError {
    #[error("retained count {q_prime} must be below N = {n}")]
    InvalidQprime { q_prime: usize, n: usize },
    #[error("slot {slot}: eigenvalue {lambda} is below sigma2 = {sigma2}")]
    NegativeUnderRoot { slot: usize, lambda: f64, sigma2: f64 },
    #[error("rotation is not orthogonal (max deviation {0:e})")]
    NonOrthogonalR(f64),
    #[error("eigenvalue index {index} out of range for N = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("rotation must be {expected}x{expected}, got {rows}x{cols}")]
    RotationShape { expected: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

pub type Result<T> = std::result::Result<T, DppcaError>;

const ORTHO_TOL: f64 = 1e-10;

/// Eigenpairs of `YYᵀ/M`, descending.
pub fn gram_eigs(y: &DenseMatrix) -> Result<EigenDecomposition> {
    let s = y.outer_gram().scale(1.0 / y.cols() as f64);
    Ok(sym_eig(&s)?)
}

/// `σ̂² = (1/(N−Q′)) Σ_{j>Q′} λ_j`, the mean of the discarded eigenvalues.
pub fn sigma2_mle(eigvals: &[f64], q_prime: usize, n: usize) -> Result<f64> {
    if q_prime >= n || n > eigvals.len() {
        return Err(DppcaError::InvalidQprime { q_prime, n });
    }
    let tail = &eigvals[q_prime..n];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// What occupies one of the `Q` columns of a stationary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Eigenpair `k` (0-based, descending order).
    Eigen(usize),
    /// `λ = σ²`: an exactly zero column.
    SigmaFill,
}

/// Type of a stationary point of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationaryKind {
    GlobalOptimum,
    /// An optimum that is not strict: a retained eigenvalue ties a discarded one.
    LocalOptimum,
    Saddle,
    LocalMinimum,
}

impl fmt::Display for StationaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GlobalOptimum => "global-optimum",
            Self::LocalOptimum => "local-optimum",
            Self::Saddle => "saddle",
            Self::LocalMinimum => "local-minimum",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub x_hat: DenseMatrix,
    /// Diagonal of `Λ_Q`: the eigenvalue of each slot, or `σ²` when filled.
    pub retained_eigvals: Vec<f64>,
    pub kind: StationaryKind,
}

/// Sign pattern of the Hessian blocks: every retained eigenvalue above every
/// discarded one is an optimum, every one below is a minimum, anything else
/// is a saddle.
pub fn classify_stationary(retained: &[f64], discarded: &[f64]) -> StationaryKind {
    let min_r = retained.iter().copied().fold(f64::INFINITY, f64::min);
    let max_r = retained.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_d = discarded.iter().copied().fold(f64::INFINITY, f64::min);
    let max_d = discarded.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if retained.is_empty() || discarded.is_empty() || min_r > max_d {
        StationaryKind::GlobalOptimum
    } else if min_r >= max_d {
        StationaryKind::LocalOptimum
    } else if max_r < min_d {
        StationaryKind::LocalMinimum
    } else {
        StationaryKind::Saddle
    }
}

/// `X̂ = U (Λ − σ²I)^{1/2} R` for the chosen slots. `rotation` defaults to
/// the identity.
pub fn stationary_x(
    eig: &EigenDecomposition,
    slots: &[Slot],
    sigma2: f64,
    rotation: Option<&DenseMatrix>,
) -> Result<StationaryPoint> {
    let n = eig.len();
    let q = slots.len();
    let mut coeffs = Vec::with_capacity(q);
    let mut retained = Vec::with_capacity(q);
    let mut kept = Vec::new();
    for (slot_idx, slot) in slots.iter().enumerate() {
        match *slot {
            Slot::Eigen(k) => {
                if k >= n {
                    return Err(DppcaError::IndexOutOfRange { index: k, n });
                }
                let lambda = eig.values[k];
                let gap = lambda - sigma2;
                if gap < -1e-12 * lambda.abs().max(sigma2.abs()).max(1.0) {
                    return Err(DppcaError::NegativeUnderRoot {
                        slot: slot_idx,
                        lambda,
                        sigma2,
                    });
                }
                coeffs.push(gap.max(0.0).sqrt());
                retained.push(lambda);
                kept.push(k);
            }
            Slot::SigmaFill => {
                coeffs.push(0.0);
                retained.push(sigma2);
            }
        }
    }
    let mut x = DenseMatrix::zeros(n, q);
    for (c, slot) in slots.iter().enumerate() {
        if let Slot::Eigen(k) = *slot {
            for r in 0..n {
                x[(r, c)] = eig.vectors[(r, k)] * coeffs[c];
            }
        }
    }
    if let Some(r) = rotation {
        if r.shape() != (q, q) {
            return Err(DppcaError::RotationShape {
                expected: q,
                rows: r.rows(),
                cols: r.cols(),
            });
        }
        let mut rtr = r.gram();
        rtr.add_diag(-1.0);
        let dev = rtr.max_abs();
        if dev > ORTHO_TOL {
            return Err(DppcaError::NonOrthogonalR(dev));
        }
        x = x.matmul(r)?;
    }

    let kept_values: Vec<f64> = kept.iter().map(|&k| eig.values[k]).collect();
    let discarded: Vec<f64> = (0..n)
        .filter(|k| !kept.contains(k))
        .map(|k| eig.values[k])
        .collect();
    let mut kind = classify_stationary(&kept_values, &discarded);
    let filled = kept.len() < q;
    if filled
        && matches!(kind, StationaryKind::GlobalOptimum | StationaryKind::LocalOptimum)
        && discarded.iter().any(|&d| d > sigma2)
    {
        // a zero column could grow along an unused eigenvector with λ > σ²
        kind = StationaryKind::Saddle;
    }
    Ok(StationaryPoint {
        x_hat: x,
        retained_eigvals: retained,
        kind,
    })
}

/// `‖S K⁻¹ X̂ − X̂‖_F` with `S = YYᵀ/M` and `K = X̂X̂ᵀ + σ²I`; zero at a
/// stationary point. Uses `K⁻¹X̂ = X̂(X̂ᵀX̂ + σ²I)⁻¹`, so no `N x N` matrix is
/// formed.
pub fn stationarity_residual(y: &DenseMatrix, x_hat: &DenseMatrix, sigma2: f64) -> Result<f64> {
    let mut a = x_hat.gram();
    a.add_diag(sigma2);
    let chol = Cholesky::new(&a)?;
    let kinv_x = chol.solve(&x_hat.transpose())?.transpose();
    let proj = y.t_matmul(&kinv_x)?;
    let s_kinv_x = y.matmul(&proj)?.scale(1.0 / y.cols() as f64);
    Ok(s_kinv_x.sub(x_hat)?.frobenius_norm())
}

/// DPPCA log-likelihood `Σ_j log N(y_j | 0, XXᵀ + σ²I)`.
pub fn log_likelihood(y: &DenseMatrix, x: &DenseMatrix, sigma2: f64) -> Result<f64> {
    Ok(LowRankLoglik::evaluate(x, sigma2, y, None)?.value)
}

/// Log-likelihood at a stationary point from the spectrum alone:
///
/// ```text
/// −M/2 · { N log 2π + Σ_{retained} log λ_j + (N − Q′) log σ² + (1/σ²) Σ_{others} λ_j + Q′ }
/// ```
///
/// `retained` are the indices of the non-zero columns.
pub fn closed_form_log_likelihood(eigvals: &[f64], retained: &[usize], sigma2: f64, m: usize) -> f64 {
    let n = eigvals.len() as f64;
    let qp = retained.len() as f64;
    let log_kept: f64 = retained.iter().map(|&k| eigvals[k].ln()).sum();
    let rest: f64 = (0..eigvals.len())
        .filter(|k| !retained.contains(k))
        .map(|k| eigvals[k])
        .sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * m as f64 * (n * ln2pi + log_kept + (n - qp) * sigma2.ln() + rest / sigma2 + qp)
}

/// Collapse regime predicted for a fixed `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `σ²` is the maximum-likelihood value for the top `Q` eigenpairs.
    GlobalOptimum,
    /// `q` of the `Q` columns are driven to zero.
    ZeroColumns(usize),
    /// `σ² > λ₁`: the only stable maximum is `X̂ = 0`.
    AllZero,
    /// `σ² < λ_N`: stationary points form a cluster of local minima.
    LocalMinCluster,
    /// `σ²` sits on an eigenvalue, or the retained spectrum ties the discarded one.
    Ambiguous,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GlobalOptimum => f.write_str("global-optimum"),
            Self::ZeroColumns(q) => write!(f, "zero-columns({q})"),
            Self::AllZero => f.write_str("all-zero"),
            Self::LocalMinCluster => f.write_str("local-min-cluster"),
            Self::Ambiguous => f.write_str("ambiguous"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeCall {
    pub regime: Regime,
    pub predicted_zero_cols: usize,
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-12 * scale
}

/// Regime for `Q` latent columns at noise variance `sigma2`. The zero-column
/// count is `#{k ≤ Q : λ_k ≤ σ²}` in every regime except `LocalMinCluster`
/// and `GlobalOptimum`, which predict none.
pub fn classify_regime(eigvals: &[f64], sigma2: f64, q: usize) -> RegimeCall {
    let n = eigvals.len();
    let q_eff = q.min(n);
    let scale = eigvals.first().map_or(1.0, |v| v.abs()).max(sigma2.abs()).max(1.0);
    let zero_cols = eigvals[..q_eff].iter().filter(|&&l| l <= sigma2).count() + (q - q_eff);
    if n == 0 {
        return RegimeCall {
            regime: Regime::AllZero,
            predicted_zero_cols: q,
        };
    }
    if q_eff < n {
        let mle = sigma2_mle(eigvals, q_eff, n).expect("q below n");
        if close(sigma2, mle, scale) {
            let tie = q_eff > 0 && close(eigvals[q_eff - 1], eigvals[q_eff], scale);
            return RegimeCall {
                regime: if tie { Regime::Ambiguous } else { Regime::GlobalOptimum },
                predicted_zero_cols: 0,
            };
        }
    }
    if eigvals.iter().any(|&l| close(l, sigma2, scale)) {
        return RegimeCall {
            regime: Regime::Ambiguous,
            predicted_zero_cols: zero_cols,
        };
    }
    if sigma2 > eigvals[0] {
        RegimeCall {
            regime: Regime::AllZero,
            predicted_zero_cols: q,
        }
    } else if sigma2 < eigvals[n - 1] {
        RegimeCall {
            regime: Regime::LocalMinCluster,
            predicted_zero_cols: 0,
        }
    } else {
        RegimeCall {
            regime: Regime::ZeroColumns(zero_cols),
            predicted_zero_cols: zero_cols,
        }
    }
}

/// Spectrum, noise estimate and regime of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DppcaReport {
    pub eigvals: Vec<f64>,
    pub q: usize,
    /// `σ̂²` with `Q′ = Q`.
    pub sigma2_hat: f64,
    /// Noise variance the regime was evaluated at.
    pub sigma2: f64,
    pub regime: Regime,
    pub predicted_zero_cols: usize,
}

impl DppcaReport {
    /// Diagnoses `y` for `q` latent dimensions, at `sigma2` or, when absent, at `σ̂²`.
    pub fn new(y: &DenseMatrix, q: usize, sigma2: Option<f64>) -> Result<Self> {
        let eig = gram_eigs(y)?;
        let n = eig.len();
        let sigma2_hat = sigma2_mle(&eig.values, q, n)?;
        let s2 = sigma2.unwrap_or(sigma2_hat);
        let call = classify_regime(&eig.values, s2, q);
        Ok(Self {
            eigvals: eig.values,
            q,
            sigma2_hat,
            sigma2: s2,
            regime: call.regime,
            predicted_zero_cols: call.predicted_zero_cols,
        })
    }

    /// `key: value` lines, floats in round-trip form.
    pub fn to_record(&self) -> String {
        let trace: f64 = self.eigvals.iter().sum();
        format!(
            "n: {}\nq: {}\nsigma2_hat: {:e}\nsigma2: {:e}\nregime: {}\npredicted_zero_cols: {}\nlambda_1: {:e}\nlambda_n: {:e}\neigval_sum: {:e}\n",
            self.eigvals.len(),
            self.q,
            self.sigma2_hat,
            self.sigma2,
            self.regime,
            self.predicted_zero_cols,
            self.eigvals.first().copied().unwrap_or(0.0),
            self.eigvals.last().copied().unwrap_or(0.0),
            trace,
        )
    }
}
