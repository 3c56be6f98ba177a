//! Stationary kernels and the spectral-mixture random Fourier feature map.
//!
//! The spectral mixture (SM) kernel places a Gaussian mixture on the
//! spectral density of a stationary kernel:
//!
//! ```text
//! k(x, x') = Σ_i α_i · exp(−2π² Σ_q σ²_iq τ_q²) · cos(2π μ_iᵀ τ),   τ = x − x'
//! ```
//!
//! Its random-feature approximation draws `L/2` spectral points per mixture
//! component with the reparameterization `w = μ_i + σ_i ⊙ ε` and stacks the
//! per-component maps scaled by `√α_i`, which keeps the approximation
//! differentiable in every hyperparameter, mixture weights included.

use std::f64::consts::PI;

use thiserror::Error;

use crate::linalg::{dot, DenseMatrix};
use crate::rng::{rng_from_seed, standard_normals};

/// Floor applied to spectral variances after exponentiation.
pub const SPECTRAL_VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature count L must be even and at least 2, got {0}")]
    OddL(usize),
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("kernel scale `{name}` must be positive, got {value}")]
    NonPositiveScale { name: &'static str, value: f64 },
    #[error("spectral mixture needs at least one component")]
    NoComponents,
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Anything that evaluates `k(x, x')` on latent vectors.
pub trait Kernel {
    fn eval(&self, x: &[f64], xp: &[f64]) -> f64;
}

impl<F: Fn(&[f64], &[f64]) -> f64> Kernel for F {
    fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        self(x, xp)
    }
}

/// Inner-product kernel `xᵀx'`; turns the GPLVM into dual probabilistic PCA.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearKernel;

impl Kernel for LinearKernel {
    fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        dot(x, xp)
    }
}

/// Gram matrix `K[i, j] = k(x_i, x_j)` over the rows of `x`. Only the lower
/// triangle is evaluated, so the result is exactly symmetric.
pub fn kernel_matrix<K: Kernel + ?Sized>(x: &DenseMatrix, kernel: &K) -> DenseMatrix {
    let n = x.rows();
    let mut k = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(x.row(i), x.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `K[i, j] = k(a_i, b_j)`.
pub fn cross_kernel<K: Kernel + ?Sized>(a: &DenseMatrix, b: &DenseMatrix, kernel: &K) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| kernel.eval(a.row(i), b.row(j)))
}

/// Spectral mixture hyperparameters plus the projection (noise) variance.
/// Positive quantities are stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct SmKernelParams {
    /// `log α_i`, one per component.
    pub log_weights: Vec<f64>,
    /// `μ_i`, an `m x Q` matrix.
    pub means: DenseMatrix,
    /// `log σ²_i`, an `m x Q` matrix.
    pub log_var: DenseMatrix,
    /// `log σ²` of the observation model.
    pub log_sigma2: f64,
}

impl SmKernelParams {
    pub fn new(
        log_weights: Vec<f64>,
        means: DenseMatrix,
        log_var: DenseMatrix,
        log_sigma2: f64,
    ) -> Result<Self> {
        let m = log_weights.len();
        if m == 0 {
            return Err(KernelError::NoComponents);
        }
        for mat in [&means, &log_var] {
            if mat.rows() != m {
                return Err(KernelError::DimensionMismatch {
                    expected: m,
                    got: mat.rows(),
                });
            }
        }
        if means.cols() != log_var.cols() {
            return Err(KernelError::DimensionMismatch {
                expected: means.cols(),
                got: log_var.cols(),
            });
        }
        Ok(Self {
            log_weights,
            means,
            log_var,
            log_sigma2,
        })
    }

    /// Parameters from natural-scale values.
    pub fn from_natural(
        weights: &[f64],
        means: DenseMatrix,
        variances: DenseMatrix,
        sigma2: f64,
    ) -> Result<Self> {
        Self::new(
            weights.iter().map(|w| w.ln()).collect(),
            means,
            variances.map(f64::ln),
            sigma2.ln(),
        )
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// `σ²_iq = max(exp(log σ²_iq), 1e-12)`.
    pub fn variances(&self) -> DenseMatrix {
        self.log_var.map(|v| v.exp().max(SPECTRAL_VAR_FLOOR))
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.latent_dim() {
            return Err(KernelError::DimensionMismatch {
                expected: self.latent_dim(),
                got: len,
            });
        }
        Ok(())
    }
}

impl Kernel for SmKernelParams {
    fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        let weights = self.weights();
        let var = self.variances();
        let mut k = 0.0;
        for (i, alpha) in weights.iter().enumerate() {
            let mut quad = 0.0;
            let mut phase = 0.0;
            for q in 0..x.len() {
                let tau = x[q] - xp[q];
                quad += var[(i, q)] * tau * tau;
                phase += self.means[(i, q)] * tau;
            }
            k += alpha * (-2.0 * PI * PI * quad).exp() * (2.0 * PI * phase).cos();
        }
        k
    }
}

/// Exact SM kernel value at `(x, x')`.
pub fn sm_kernel_eval(x: &[f64], xp: &[f64], params: &SmKernelParams) -> Result<f64> {
    params.check_dim(x.len())?;
    params.check_dim(xp.len())?;
    Ok(params.eval(x, xp))
}

/// Fixed kernels used to generate synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseKernelConfig {
    /// `ℓ_o · exp(−‖τ‖² / (2ℓ_l²))`.
    Rbf { outputscale: f64, lengthscale: f64 },
    /// `ℓ_o · exp(−2 Σ_q sin²(π τ_q / p) / ℓ_l²)`.
    Periodic {
        outputscale: f64,
        lengthscale: f64,
        period: f64,
    },
    Sum(Vec<BaseKernelConfig>),
}

impl BaseKernelConfig {
    /// RBF with unit output- and lengthscale.
    pub fn rbf_preset() -> Self {
        Self::Rbf {
            outputscale: 1.0,
            lengthscale: 1.0,
        }
    }

    /// RBF(0.5, 1) + periodic(0.5, 1, p = 4.5).
    pub fn rbf_periodic_preset() -> Self {
        Self::Sum(vec![
            Self::Rbf {
                outputscale: 0.5,
                lengthscale: 1.0,
            },
            Self::Periodic {
                outputscale: 0.5,
                lengthscale: 1.0,
                period: 4.5,
            },
        ])
    }

    pub fn validate(&self) -> Result<()> {
        fn pos(name: &'static str, value: f64) -> Result<()> {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(KernelError::NonPositiveScale { name, value })
            }
        }
        match self {
            Self::Rbf {
                outputscale,
                lengthscale,
            } => {
                pos("outputscale", *outputscale)?;
                pos("lengthscale", *lengthscale)
            }
            Self::Periodic {
                outputscale,
                lengthscale,
                period,
            } => {
                pos("outputscale", *outputscale)?;
                pos("lengthscale", *lengthscale)?;
                pos("period", *period)
            }
            Self::Sum(parts) => parts.iter().try_for_each(|p| p.validate()),
        }
    }
}

impl Kernel for BaseKernelConfig {
    fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        match self {
            Self::Rbf {
                outputscale,
                lengthscale,
            } => {
                let d2: f64 = x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum();
                outputscale * (-d2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            Self::Periodic {
                outputscale,
                lengthscale,
                period,
            } => {
                let s: f64 = x
                    .iter()
                    .zip(xp)
                    .map(|(a, b)| (PI * (a - b) / period).sin().powi(2))
                    .sum();
                outputscale * (-2.0 * s / (lengthscale * lengthscale)).exp()
            }
            Self::Sum(parts) => parts.iter().map(|p| p.eval(x, xp)).sum(),
        }
    }
}

pub fn base_kernel_eval(x: &[f64], xp: &[f64], cfg: &BaseKernelConfig) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(KernelError::DimensionMismatch {
            expected: x.len(),
            got: xp.len(),
        });
    }
    cfg.validate()?;
    Ok(cfg.eval(x, xp))
}

/// Reparameterized spectral points. Row `i·(L/2) + l` of `points` is
/// `w_l^(i) = μ_i + σ_i ⊙ ε_l^(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    pub components: usize,
    /// Feature count per component (even).
    pub features: usize,
    /// Standard-normal draws, same layout as `points`.
    pub eps: DenseMatrix,
    pub points: DenseMatrix,
}

impl SpectralSample {
    pub fn half(&self) -> usize {
        self.features / 2
    }

    /// Spectral point `l` of component `i`.
    pub fn point(&self, i: usize, l: usize) -> &[f64] {
        self.points.row(i * self.half() + l)
    }

    /// Rebuilds the points from stored noise under (possibly new) parameters.
    pub fn with_params(eps: DenseMatrix, features: usize, params: &SmKernelParams) -> Result<Self> {
        check_features(features)?;
        let m = params.components();
        let half = features / 2;
        if eps.rows() != m * half {
            return Err(KernelError::DimensionMismatch {
                expected: m * half,
                got: eps.rows(),
            });
        }
        params.check_dim(eps.cols())?;
        let points = spectral_points(&eps, half, params);
        Ok(Self {
            components: m,
            features,
            eps,
            points,
        })
    }
}

fn check_features(features: usize) -> Result<()> {
    if features < 2 || features % 2 != 0 {
        return Err(KernelError::OddL(features));
    }
    Ok(())
}

/// `w = μ_i + sqrt(max(exp(log σ²_i), floor)) ⊙ ε`.
pub(crate) fn spectral_points(eps: &DenseMatrix, half: usize, params: &SmKernelParams) -> DenseMatrix {
    let std = params.variances().map(f64::sqrt);
    DenseMatrix::from_fn(eps.rows(), eps.cols(), |r, q| {
        let i = r / half;
        params.means[(i, q)] + std[(i, q)] * eps[(r, q)]
    })
}

/// Draws `L/2` standard-normal spectral noises per component and maps them
/// through the reparameterization. Deterministic in `seed`.
pub fn sample_spectral_points(params: &SmKernelParams, features: usize, seed: u64) -> Result<SpectralSample> {
    check_features(features)?;
    let mut rng = rng_from_seed(seed);
    draw_spectral_sample(params, features, &mut rng)
}

pub(crate) fn draw_spectral_sample(
    params: &SmKernelParams,
    features: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SpectralSample> {
    check_features(features)?;
    let rows = params.components() * features / 2;
    let q = params.latent_dim();
    let eps = DenseMatrix::from_vec(rows, q, standard_normals(rng, rows * q)).expect("sized buffer");
    SpectralSample::with_params(eps, features, params)
}

/// Per-column scale `√(α_i · 2/L)` of the stacked feature map.
pub(crate) fn block_scales(params: &SmKernelParams, features: usize) -> Vec<f64> {
    let c = 2.0 / features as f64;
    params.weights().iter().map(|a| (a * c).sqrt()).collect()
}

/// Stacked SM random-feature vector of length `m·L`. Within a component,
/// each spectral point contributes `(sin, cos)` in draw order.
pub fn sm_rff_features(x: &[f64], sample: &SpectralSample, params: &SmKernelParams) -> Result<Vec<f64>> {
    params.check_dim(x.len())?;
    let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec()).expect("row vector");
    Ok(feature_matrix(&xm, sample, params)?.into_vec())
}

/// Random feature matrix `Φ` with row `n` equal to `φ(x_n)`.
pub fn feature_matrix(x: &DenseMatrix, sample: &SpectralSample, params: &SmKernelParams) -> Result<DenseMatrix> {
    params.check_dim(x.cols())?;
    if sample.components != params.components() {
        return Err(KernelError::DimensionMismatch {
            expected: params.components(),
            got: sample.components,
        });
    }
    let half = sample.half();
    let scales = block_scales(params, sample.features);
    let width = sample.components * sample.features;
    let mut phi = DenseMatrix::zeros(x.rows(), width);
    for n in 0..x.rows() {
        let xn = x.row(n);
        let row = phi.row_mut(n);
        for (k, w) in (0..sample.points.rows()).map(|k| (k, sample.points.row(k))) {
            let arg = dot(xn, w) * (2.0 * PI);
            let s = scales[k / half];
            row[2 * k] = arg.sin() * s;
            row[2 * k + 1] = arg.cos() * s;
        }
    }
    Ok(phi)
}

/// Concentration bound on `P(‖K̂ − K‖₂ ≥ ε)` for the stacked SM feature map.
/// The returned probability is not clipped.
pub fn feature_error_bound(params: &SmKernelParams, n: usize, features: usize, epsilon: f64, k_norm: f64) -> Result<f64> {
    if epsilon <= 0.0 || epsilon.is_nan() {
        return Err(KernelError::NonPositiveEpsilon(epsilon));
    }
    let a = params.weights().iter().map(|w| w * w).sum::<f64>().sqrt();
    let nf = n as f64;
    let m = params.components() as f64;
    let denom = 2.0 * nf * a * (6.0 * k_norm + 3.0 * nf * a * m.sqrt() + 8.0 * epsilon);
    Ok(nf * (-3.0 * epsilon * epsilon * features as f64 / denom).exp())
}
