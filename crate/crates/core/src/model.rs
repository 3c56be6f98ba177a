//! The GPLVM variational objective.
//!
//! `q(X) = Π_n N(μ_n, diag S_n)` and `q(W) = p(W)`. The evidence lower bound
//! is
//!
//! ```text
//! ELBO = (1/I) Σ_s Σ_j log N(y_j | 0, Φ_s Φ_sᵀ + σ²I)  −  Σ_n KL(q(x_n) ‖ N(0, I))
//! ```
//!
//! with `Φ_s` the stacked spectral-mixture feature matrix built from one
//! reparameterized draw of `X` and of the spectral points. The first term is
//! "term1", the KL sum "term2".
//!
//! [`elbo_mc`] evaluates the bound directly; [`elbo_with_gradient`] records
//! the same arithmetic on a [`Tape`] and returns gradients for every
//! parameter group. Both consume an identical [`McNoise`] stream for a given
//! seed, so their values agree exactly.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::kernels::{
    feature_matrix, kernel_matrix, Kernel, KernelError, SmKernelParams, SpectralSample,
    SPECTRAL_VAR_FLOOR,
};
use crate::likelihood::{diag_gaussian_kl, LikelihoodError, LowRankLoglik};
use crate::linalg::{Cholesky, DenseMatrix, LinalgError};
use crate::mask::ObservationMask;
use crate::rng::{rng_from_seed, standard_normals};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("at least one Monte-Carlo sample is required")]
    NoSamples,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Means and log-variances of the factorized Gaussian posterior over latents.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    /// `N x Q` means.
    pub mu: DenseMatrix,
    /// `N x Q` log of the diagonal of each `S_n`.
    pub log_s: DenseMatrix,
}

impl VariationalParams {
    pub fn new(mu: DenseMatrix, log_s: DenseMatrix) -> Result<Self> {
        if mu.shape() != log_s.shape() {
            return Err(ModelError::Shape {
                what: "log_s",
                expected: mu.shape(),
                got: log_s.shape(),
            });
        }
        Ok(Self { mu, log_s })
    }

    /// `μ = 0`, `S = I`.
    pub fn prior(n: usize, q: usize) -> Self {
        Self {
            mu: DenseMatrix::zeros(n, q),
            log_s: DenseMatrix::zeros(n, q),
        }
    }

    pub fn n(&self) -> usize {
        self.mu.rows()
    }

    pub fn q(&self) -> usize {
        self.mu.cols()
    }
}

/// One ELBO evaluation split into its two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    /// `term1 − term2`.
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub per_sample_term1: Vec<f64>,
}

/// `½ Σ_n [tr S_n + μ_nᵀμ_n − log|S_n| − Q]`.
pub fn kl_term(vp: &VariationalParams) -> f64 {
    diag_gaussian_kl(&vp.mu, &vp.log_s)
}

/// `log N(y | 0, ΦΦᵀ + σ²I)` for one column, in `O(N R²)`.
pub fn lowrank_gaussian_loglik(y: &[f64], phi: &DenseMatrix, sigma2: f64) -> Result<f64> {
    let col = DenseMatrix::column(y);
    Ok(LowRankLoglik::evaluate(phi, sigma2, &col, None)?.value)
}

/// Base noise of one Monte-Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct McNoise {
    /// `N x Q`, for `X = μ + √S ⊙ ε_x`.
    pub eps_x: DenseMatrix,
    /// `(m·L/2) x Q`, for the spectral points.
    pub eps_w: DenseMatrix,
}

/// Draws `samples` noise pairs from one seeded stream: for each sample, the
/// `N x Q` latent noise first, then the spectral noise.
pub fn draw_noise(
    n: usize,
    q: usize,
    components: usize,
    features: usize,
    samples: usize,
    seed: u64,
) -> Vec<McNoise> {
    let mut rng = rng_from_seed(seed);
    let rows_w = components * features / 2;
    (0..samples)
        .map(|_| {
            let eps_x = DenseMatrix::from_vec(n, q, standard_normals(&mut rng, n * q)).expect("sized");
            let eps_w =
                DenseMatrix::from_vec(rows_w, q, standard_normals(&mut rng, rows_w * q)).expect("sized");
            McNoise { eps_x, eps_w }
        })
        .collect()
}

fn check_inputs(
    y: &DenseMatrix,
    vp: &VariationalParams,
    params: &SmKernelParams,
    features: usize,
    noise: &[McNoise],
) -> Result<()> {
    if noise.is_empty() {
        return Err(ModelError::NoSamples);
    }
    if features < 2 || features % 2 != 0 {
        return Err(KernelError::OddL(features).into());
    }
    if vp.n() != y.rows() {
        return Err(ModelError::Shape {
            what: "variational means",
            expected: (y.rows(), vp.q()),
            got: vp.mu.shape(),
        });
    }
    if params.latent_dim() != vp.q() {
        return Err(KernelError::DimensionMismatch {
            expected: vp.q(),
            got: params.latent_dim(),
        }
        .into());
    }
    let w_shape = (params.components() * features / 2, vp.q());
    for s in noise {
        if s.eps_x.shape() != vp.mu.shape() {
            return Err(ModelError::Shape {
                what: "latent noise",
                expected: vp.mu.shape(),
                got: s.eps_x.shape(),
            });
        }
        if s.eps_w.shape() != w_shape {
            return Err(ModelError::Shape {
                what: "spectral noise",
                expected: w_shape,
                got: s.eps_w.shape(),
            });
        }
    }
    Ok(())
}

/// Reparameterized latent draw `μ + exp(½ log S) ⊙ ε`.
pub fn sample_latents(vp: &VariationalParams, eps_x: &DenseMatrix) -> DenseMatrix {
    let sx = vp.log_s.map(|v| (v * 0.5).exp());
    let scaled = sx.zip_map(eps_x, |s, e| s * e);
    vp.mu.zip_map(&scaled, |m, v| m + v)
}

/// Feature matrix `Φ_s` of one Monte-Carlo sample.
pub fn sample_features(
    vp: &VariationalParams,
    params: &SmKernelParams,
    features: usize,
    noise: &McNoise,
) -> Result<DenseMatrix> {
    let x = sample_latents(vp, &noise.eps_x);
    let sample = SpectralSample::with_params(noise.eps_w.clone(), features, params)?;
    Ok(feature_matrix(&x, &sample, params)?)
}

/// Monte-Carlo ELBO with `samples` draws from the stream seeded by `seed`.
pub fn elbo_mc(
    y: &DenseMatrix,
    vp: &VariationalParams,
    params: &SmKernelParams,
    features: usize,
    samples: usize,
    seed: u64,
    mask: Option<&ObservationMask>,
) -> Result<ElboBreakdown> {
    let noise = draw_noise(vp.n(), vp.q(), params.components(), features, samples, seed);
    elbo_with_noise(y, vp, params, features, &noise, mask)
}

/// [`elbo_mc`] on explicit noise.
pub fn elbo_with_noise(
    y: &DenseMatrix,
    vp: &VariationalParams,
    params: &SmKernelParams,
    features: usize,
    noise: &[McNoise],
    mask: Option<&ObservationMask>,
) -> Result<ElboBreakdown> {
    check_inputs(y, vp, params, features, noise)?;
    let sigma2 = params.sigma2();
    let mut per_sample = Vec::with_capacity(noise.len());
    for s in noise {
        let phi = sample_features(vp, params, features, s)?;
        per_sample.push(LowRankLoglik::evaluate(&phi, sigma2, y, mask)?.value);
    }
    let term1 = sum_in_order(&per_sample) * (1.0 / noise.len() as f64);
    let term2 = kl_term(vp);
    Ok(ElboBreakdown {
        total: term1 - term2,
        term1,
        term2,
        per_sample_term1: per_sample,
    })
}

fn sum_in_order(values: &[f64]) -> f64 {
    let mut acc = values[0];
    for v in &values[1..] {
        acc += v;
    }
    acc
}

/// Differentiable leaves of the ELBO graph.
#[derive(Clone, Copy)]
pub struct ElboInputs<'t> {
    pub mu: Var<'t>,
    pub log_s: Var<'t>,
    /// `1 x m`.
    pub log_weights: Var<'t>,
    pub means: Var<'t>,
    pub log_var: Var<'t>,
    /// `1 x 1`.
    pub log_sigma2: Var<'t>,
}

impl<'t> ElboInputs<'t> {
    /// Registers the parameters as named tape inputs: `mu`, `log_s`,
    /// `log_weights`, `means`, `log_var`, `log_sigma2`.
    pub fn record(tape: &'t Tape, vp: &VariationalParams, params: &SmKernelParams) -> Self {
        Self {
            mu: tape.input("mu", vp.mu.clone()),
            log_s: tape.input("log_s", vp.log_s.clone()),
            log_weights: tape.input(
                "log_weights",
                DenseMatrix::from_vec(1, params.components(), params.log_weights.clone()).expect("row"),
            ),
            means: tape.input("means", params.means.clone()),
            log_var: tape.input("log_var", params.log_var.clone()),
            log_sigma2: tape.input("log_sigma2", DenseMatrix::scalar(params.log_sigma2)),
        }
    }
}

/// Output nodes of a recorded ELBO.
pub struct ElboNodes<'t> {
    pub total: Var<'t>,
    pub term1: Var<'t>,
    pub term2: Var<'t>,
    pub per_sample: Vec<Var<'t>>,
}

/// Records the ELBO on `tape`, mirroring [`elbo_with_noise`] operation by
/// operation.
pub fn elbo_graph<'t>(
    tape: &'t Tape,
    inputs: ElboInputs<'t>,
    y: &DenseMatrix,
    features: usize,
    noise: &[McNoise],
    mask: Option<&ObservationMask>,
) -> Result<ElboNodes<'t>> {
    if noise.is_empty() {
        return Err(ModelError::NoSamples);
    }
    if features < 2 || features % 2 != 0 {
        return Err(KernelError::OddL(features).into());
    }
    let m = inputs.log_weights.shape().1;
    let half = features / 2;
    let point_owner: Vec<usize> = (0..m * half).map(|r| r / half).collect();
    let column_owner: Vec<usize> = (0..m * features).map(|c| c / features).collect();

    let sx = inputs.log_s.scale(0.5).exp();
    let std_w = inputs
        .log_var
        .exp()
        .floor_min(SPECTRAL_VAR_FLOOR)
        .sqrt()
        .gather_rows(&point_owner)?;
    let means_w = inputs.means.gather_rows(&point_owner)?;
    let scales = inputs
        .log_weights
        .exp()
        .scale(2.0 / features as f64)
        .sqrt()
        .t()
        .gather_rows(&column_owner)?
        .t();
    let sigma2 = inputs.log_sigma2.exp();

    let mut per_sample = Vec::with_capacity(noise.len());
    for s in noise {
        let x = inputs.mu.add(sx.mul(tape.constant(s.eps_x.clone()))?)?;
        let w = means_w.add(std_w.mul(tape.constant(s.eps_w.clone()))?)?;
        let z = x.matmul(w.t())?.scale(2.0 * PI);
        let phi = z.sin().interleave_cols(z.cos())?.mul_row_broadcast(scales)?;
        per_sample.push(phi.lowrank_gaussian_loglik(sigma2, y, mask)?);
    }
    let mut acc = per_sample[0];
    for v in &per_sample[1..] {
        acc = acc.add(*v)?;
    }
    let term1 = acc.scale(1.0 / noise.len() as f64);
    let term2 = inputs.mu.diag_kl(inputs.log_s)?;
    let total = term1.sub(term2)?;
    Ok(ElboNodes {
        total,
        term1,
        term2,
        per_sample,
    })
}

/// ELBO value and its gradient with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub breakdown: ElboBreakdown,
    pub mu: DenseMatrix,
    pub log_s: DenseMatrix,
    pub log_weights: Vec<f64>,
    pub means: DenseMatrix,
    pub log_var: DenseMatrix,
    pub log_sigma2: f64,
}

pub fn elbo_with_gradient(
    y: &DenseMatrix,
    vp: &VariationalParams,
    params: &SmKernelParams,
    features: usize,
    noise: &[McNoise],
    mask: Option<&ObservationMask>,
) -> Result<ElboGradient> {
    check_inputs(y, vp, params, features, noise)?;
    let tape = Tape::new();
    let inputs = ElboInputs::record(&tape, vp, params);
    let nodes = elbo_graph(&tape, inputs, y, features, noise, mask)?;
    let grads = tape.backward(nodes.total)?;
    let g = |v: Var<'_>| grads.get(v).expect("parameter leaf").clone();
    Ok(ElboGradient {
        breakdown: ElboBreakdown {
            total: nodes.total.scalar(),
            term1: nodes.term1.scalar(),
            term2: nodes.term2.scalar(),
            per_sample_term1: nodes.per_sample.iter().map(|v| v.scalar()).collect(),
        },
        mu: g(inputs.mu),
        log_s: g(inputs.log_s),
        log_weights: g(inputs.log_weights).into_vec(),
        means: g(inputs.means),
        log_var: g(inputs.log_var),
        log_sigma2: g(inputs.log_sigma2).item(),
    })
}

/// `Σ_j log N(y_j | 0, K + σ²I)` with `K` the exact kernel Gram matrix over
/// the rows of `x`. Dense `O(N³)`; intended for small problems and testing.
pub fn exact_log_marginal<K: Kernel + ?Sized>(
    y: &DenseMatrix,
    x: &DenseMatrix,
    kernel: &K,
    sigma2: f64,
) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(ModelError::Shape {
            what: "latents",
            expected: (y.rows(), x.cols()),
            got: x.shape(),
        });
    }
    let mut k = kernel_matrix(x, kernel);
    k.add_diag(sigma2);
    let chol = Cholesky::new(&k)?;
    let logdet = chol.logdet();
    let n = y.rows() as f64;
    let ln2pi = (2.0 * PI).ln();
    let mut total = 0.0;
    for j in 0..y.cols() {
        let col = y.col(j);
        let mut z = col.clone();
        chol.forward_in_place(&mut z);
        let quad: f64 = z.iter().map(|v| v * v).sum();
        total += -0.5 * n * ln2pi - 0.5 * logdet - 0.5 * quad;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::LinearKernel;
    use crate::linalg::cholesky_logdet_solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = 1.8378770664093453;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn setup(seed: u64, n: usize, m: usize, q: usize, comps: usize) -> (DenseMatrix, VariationalParams, SmKernelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random(&mut rng, n, m, 1.0);
        let vp = VariationalParams::new(random(&mut rng, n, q, 1.0), random(&mut rng, n, q, 0.5)).unwrap();
        let params = SmKernelParams::new(
            (0..comps).map(|_| rng.random_range(-1.0..0.0)).collect(),
            random(&mut rng, comps, q, 0.3),
            random(&mut rng, comps, q, 0.5),
            rng.random_range(-1.5..-0.5),
        )
        .unwrap();
        (y, vp, params)
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_term(&VariationalParams::prior(5, 3)), 0.0);
        let vp = VariationalParams::new(
            DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            DenseMatrix::zeros(1, 2),
        )
        .unwrap();
        assert_eq!(kl_term(&vp), 0.5);
        let vp = VariationalParams::new(DenseMatrix::zeros(1, 2), DenseMatrix::filled(1, 2, 2f64.ln())).unwrap();
        assert!((kl_term(&vp) - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn lowrank_loglik_examples() {
        let phi = DenseMatrix::zeros(2, 3);
        let v = lowrank_gaussian_loglik(&[0.0, 0.0], &phi, 1.0).unwrap();
        assert!((v + LN_2PI).abs() < 1e-12);
        let v = lowrank_gaussian_loglik(&[1.0, 0.0], &phi, 1.0).unwrap();
        assert!((v + LN_2PI + 0.5).abs() < 1e-12);
        assert!(matches!(
            lowrank_gaussian_loglik(&[1.0, 0.0], &phi, 0.0),
            Err(ModelError::Likelihood(LikelihoodError::Linalg(LinalgError::NonPositiveSigma(_))))
        ));
    }

    #[test]
    fn lowrank_loglik_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = random(&mut rng, 30, 12, 1.0);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut c = phi.outer_gram();
        c.add_diag(0.7);
        let (ld, sol) = cholesky_logdet_solve(&c, &DenseMatrix::column(&y)).unwrap();
        let quad: f64 = y.iter().zip(sol.as_slice()).map(|(a, b)| a * b).sum();
        let dense = -15.0 * LN_2PI - 0.5 * ld - 0.5 * quad;
        assert!((lowrank_gaussian_loglik(&y, &phi, 0.7).unwrap() - dense).abs() < 1e-8);
    }

    #[test]
    fn elbo_prior_has_zero_kl_and_is_deterministic() {
        let (y, _, params) = setup(4, 12, 3, 2, 2);
        let vp = VariationalParams::prior(12, 2);
        let a = elbo_mc(&y, &vp, &params, 8, 1, 99, None).unwrap();
        assert_eq!(a.term2, 0.0);
        let b = elbo_mc(&y, &vp, &params, 8, 1, 99, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, a.term1 - a.term2);
    }

    #[test]
    fn tape_forward_is_bit_identical_to_direct() {
        let (y, vp, params) = setup(5, 12, 3, 2, 2);
        let noise = draw_noise(12, 2, 2, 8, 3, 17);
        let direct = elbo_with_noise(&y, &vp, &params, 8, &noise, None).unwrap();
        let taped = elbo_with_gradient(&y, &vp, &params, 8, &noise, None).unwrap();
        assert_eq!(direct, taped.breakdown);
    }

    #[test]
    fn woodbury_elbo_matches_dense() {
        let (y, vp, params) = setup(6, 12, 3, 2, 2);
        let noise = draw_noise(12, 2, 2, 8, 1, 5);
        let fast = elbo_with_noise(&y, &vp, &params, 8, &noise, None).unwrap();
        let phi = sample_features(&vp, &params, 8, &noise[0]).unwrap();
        let mut c = phi.outer_gram();
        c.add_diag(params.sigma2());
        let (ld, sol) = cholesky_logdet_solve(&c, &y).unwrap();
        let quad: f64 = y.as_slice().iter().zip(sol.as_slice()).map(|(a, b)| a * b).sum();
        let dense = -0.5 * 3.0 * (12.0 * LN_2PI + ld) - 0.5 * quad - kl_term(&vp);
        assert!((fast.total - dense).abs() < 1e-8);
    }

    #[test]
    fn all_observed_mask_is_bit_identical() {
        let (y, vp, params) = setup(8, 10, 4, 2, 2);
        let mask = ObservationMask::all_observed(10, 4);
        let a = elbo_mc(&y, &vp, &params, 6, 2, 3, None).unwrap();
        let b = elbo_mc(&y, &vp, &params, 6, 2, 3, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_marginal_examples() {
        let zero = |_: &[f64], _: &[f64]| 0.0;
        let v = exact_log_marginal(&DenseMatrix::zeros(2, 1), &DenseMatrix::zeros(2, 1), &zero, 1.0).unwrap();
        assert!((v + LN_2PI).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random(&mut rng, 8, 3, 1.0);
        let x = random(&mut rng, 8, 2, 1.0);
        let a = exact_log_marginal(&y, &x, &LinearKernel, 0.3).unwrap();
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let b = exact_log_marginal(&y.select_rows(&perm), &x.select_rows(&perm), &LinearKernel, 0.3).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let (y, vp, params) = setup(1, 6, 2, 2, 2);
        assert_eq!(
            elbo_mc(&y, &vp, &params, 4, 0, 1, None).unwrap_err(),
            ModelError::NoSamples
        );
        assert!(elbo_mc(&y, &vp, &params, 5, 1, 1, None).is_err());
        let short = VariationalParams::prior(5, 2);
        assert!(elbo_mc(&y, &short, &params, 4, 1, 1, None).is_err());
    }
}
