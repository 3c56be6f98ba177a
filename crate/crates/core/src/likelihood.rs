//! Gaussian log-likelihood of data columns under the low-rank covariance
//! `C = ΦΦᵀ + σ²I`, and the closed-form diagonal-Gaussian KL divergence.
//!
//! Both are the numerically delicate pieces of the variational objective, so
//! their adjoints are written out by hand here and consumed by the tape.
//! With a missing-data mask, column `j` only sees its observed rows; columns
//! sharing an observation pattern share one capacitance factorization.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::linalg::{dot, DenseMatrix, LinalgError, LowRankFactor};
use crate::mask::{MaskError, ObservationMask};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LikelihoodError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("feature matrix has {phi} rows but data has {data}")]
    RowMismatch { phi: usize, data: usize },
}

struct Group {
    /// `None` when every row is observed.
    rows: Option<Vec<usize>>,
    cols: Vec<usize>,
    factor: LowRankFactor,
    /// `C⁻¹ y_j` for each column of the group, stacked as columns.
    alpha: DenseMatrix,
}

/// Evaluated low-rank likelihood, with enough state kept to form gradients.
pub struct LowRankLoglik {
    pub value: f64,
    pub per_column: Vec<f64>,
    groups: Vec<Group>,
}

fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

impl LowRankLoglik {
    /// `Σ_j log N(y_j | 0, Φ_jΦ_jᵀ + σ²I)` over the columns of `y`, where `Φ_j`
    /// keeps the observed rows of column `j`.
    pub fn evaluate(
        phi: &DenseMatrix,
        sigma2: f64,
        y: &DenseMatrix,
        mask: Option<&ObservationMask>,
    ) -> Result<Self, LikelihoodError> {
        let (n, m) = y.shape();
        if phi.rows() != n {
            return Err(LikelihoodError::RowMismatch {
                phi: phi.rows(),
                data: n,
            });
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(LinalgError::NonPositiveSigma(sigma2).into());
        }
        let mut patterns: BTreeMap<Option<Vec<usize>>, Vec<usize>> = BTreeMap::new();
        match mask {
            None => {
                patterns.insert(None, (0..m).collect());
            }
            Some(mask) => {
                mask.check_shape(n, m)?;
                for c in 0..m {
                    let rows = mask.observed_rows(c);
                    if rows.is_empty() {
                        return Err(MaskError::EmptyColumn(c).into());
                    }
                    let key = if rows.len() == n { None } else { Some(rows) };
                    patterns.entry(key).or_default().push(c);
                }
            }
        }

        let mut per_column = vec![0.0; m];
        let mut groups = Vec::with_capacity(patterns.len());
        for (rows, cols) in patterns {
            let sub;
            let phi_g = match &rows {
                None => phi,
                Some(r) => {
                    sub = phi.select_rows(r);
                    &sub
                }
            };
            let n_g = phi_g.rows();
            let factor = LowRankFactor::new(phi_g, sigma2)?;
            let logdet = factor.logdet();
            let mut alpha = DenseMatrix::zeros(n_g, cols.len());
            let mut yj = vec![0.0; n_g];
            for (k, &c) in cols.iter().enumerate() {
                match &rows {
                    None => {
                        for (r, v) in yj.iter_mut().enumerate() {
                            *v = y[(r, c)];
                        }
                    }
                    Some(idx) => {
                        for (v, &r) in yj.iter_mut().zip(idx) {
                            *v = y[(r, c)];
                        }
                    }
                }
                let a = factor.solve(phi_g, &yj)?;
                let quad = dot(&yj, &a);
                per_column[c] = -0.5 * n_g as f64 * ln_2pi() - 0.5 * logdet - 0.5 * quad;
                alpha.set_col(k, &a);
            }
            groups.push(Group {
                rows,
                cols,
                factor,
                alpha,
            });
        }
        let value = per_column.iter().sum();
        Ok(Self {
            value,
            per_column,
            groups,
        })
    }

    /// `(∂/∂Φ, ∂/∂σ²)` of the summed log-likelihood:
    /// `∂/∂Φ = Σ_j (C⁻¹y_jy_jᵀC⁻¹ − C⁻¹)Φ` and
    /// `∂/∂σ² = ½ Σ_j tr(C⁻¹y_jy_jᵀC⁻¹ − C⁻¹)`, both through the capacitance
    /// factor. `phi` must be the matrix passed to [`Self::evaluate`].
    pub fn gradient(&self, phi: &DenseMatrix) -> (DenseMatrix, f64) {
        let r = phi.cols();
        let mut dphi = DenseMatrix::zeros(phi.rows(), r);
        let mut dsigma2 = 0.0;
        for g in &self.groups {
            let sub;
            let phi_g = match &g.rows {
                None => phi,
                Some(idx) => {
                    sub = phi.select_rows(idx);
                    &sub
                }
            };
            let sigma2 = g.factor.sigma2;
            let inv_s2 = 1.0 / sigma2;
            let n_g = phi_g.rows();
            let m_g = g.cols.len() as f64;
            // B⁻¹ with B = I + ΦᵀΦ/σ², so (σ²I + ΦᵀΦ)⁻¹ = B⁻¹/σ²
            let (phi_binv, tr_binv) = if n_g < r {
                // tr B⁻¹ = R − tr(ΦB⁻¹Φᵀ)/σ², avoiding the explicit inverse
                let pb = g.factor.chol.solve(&phi_g.transpose()).expect("R rows").transpose();
                let tr: f64 = pb.as_slice().iter().zip(phi_g.as_slice()).map(|(a, b)| a * b).sum();
                (pb, r as f64 - tr * inv_s2)
            } else {
                let b_inv = g.factor.chol.inverse();
                (phi_g.matmul(&b_inv).expect("R x R factor"), b_inv.trace())
            };
            let cinv_phi = phi_binv.scale(inv_s2);
            let at_phi = g.alpha.t_matmul(phi_g).expect("shared rows");
            let outer = g.alpha.matmul(&at_phi).expect("shared columns");
            let grad_g = outer.zip_map(&cinv_phi, |a, b| a - m_g * b);
            match &g.rows {
                None => {
                    for (d, v) in dphi.as_mut_slice().iter_mut().zip(grad_g.as_slice()) {
                        *d += v;
                    }
                }
                Some(idx) => {
                    for (k, &row) in idx.iter().enumerate() {
                        for (d, v) in dphi.row_mut(row).iter_mut().zip(grad_g.row(k)) {
                            *d += v;
                        }
                    }
                }
            }
            let alpha_sq: f64 = g.alpha.as_slice().iter().map(|v| v * v).sum();
            let tr_cinv = (n_g as f64 - r as f64) * inv_s2 + tr_binv * inv_s2;
            dsigma2 += 0.5 * alpha_sq - 0.5 * m_g * tr_cinv;
        }
        (dphi, dsigma2)
    }
}

/// `Σ_i KL(N(μ_i, diag S_i) ‖ N(0, I))` with `S_i = exp(log_s_i)`:
/// `½ Σ_i [tr S_i + μ_iᵀμ_i − log|S_i| − Q]`.
pub fn diag_gaussian_kl(mu: &DenseMatrix, log_s: &DenseMatrix) -> f64 {
    let q = mu.cols() as f64;
    let mut total = 0.0;
    for i in 0..mu.rows() {
        let (m, ls) = (mu.row(i), log_s.row(i));
        let tr: f64 = ls.iter().map(|v| v.exp()).sum();
        let mm = dot(m, m);
        let logdet: f64 = ls.iter().sum();
        total += tr + mm - logdet - q;
    }
    0.5 * total
}

/// `(∂KL/∂μ, ∂KL/∂log_s) = (μ, ½(exp(log_s) − 1))`.
pub fn diag_gaussian_kl_gradient(mu: &DenseMatrix, log_s: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    (mu.clone(), log_s.map(|v| 0.5 * (v.exp() - 1.0)))
}
