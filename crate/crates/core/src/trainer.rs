//! Adam on the negative ELBO, with collapse telemetry and checkpoints.
//!
//! Each iteration draws fresh latent and spectral noise, records the ELBO on
//! a tape, and takes one Adam step on every parameter in log space where the
//! parameter must stay positive. The noise variance can be frozen at a fixed
//! value to reproduce the collapsed regime.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::dppca::gram_eigs;
use crate::kernels::SmKernelParams;
use crate::linalg::DenseMatrix;
use crate::mask::ObservationMask;
use crate::model::{draw_noise, elbo_mc, elbo_with_gradient, ModelError, VariationalParams};
use crate::rng::{derive_seed, rng_from_seed, standard_normals};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient has {got} entries, parameters have {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective {
        iteration: usize,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Mixture components `m`.
    pub components: usize,
    /// Random features per component `L` (even).
    pub features: usize,
    /// Latent dimension `Q`.
    pub latent_dim: usize,
    /// Monte-Carlo samples `I` per iteration.
    pub mc_samples: usize,
    pub seed: u64,
    pub learn_sigma2: bool,
    pub fixed_sigma2: Option<f64>,
    /// Relative RMS threshold below which a latent column counts as zero.
    pub zero_col_tol: f64,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            components: 2,
            features: 50,
            latent_dim: 2,
            mc_samples: 1,
            seed: 0,
            learn_sigma2: true,
            fixed_sigma2: None,
            zero_col_tol: 1e-3,
            trace_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 {
            return err("iterations must be at least 1");
        }
        if !(self.lr > 0.0) {
            return err("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return err("eps must be positive");
        }
        if self.components == 0 || self.latent_dim == 0 || self.mc_samples == 0 {
            return err("components, latent_dim and mc_samples must be at least 1");
        }
        if self.features < 2 || self.features % 2 != 0 {
            return err("features must be even and at least 2");
        }
        if self.trace_every == 0 {
            return err("trace_every must be at least 1");
        }
        if !(self.zero_col_tol > 0.0) {
            return err("zero_col_tol must be positive");
        }
        match (self.learn_sigma2, self.fixed_sigma2) {
            (false, None) => return err("fixed_sigma2 is required when learn_sigma2 = false"),
            (_, Some(s)) if !(s > 0.0 && s.is_finite()) => return err("fixed_sigma2 must be positive"),
            _ => {}
        }
        Ok(())
    }
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `log(1/(2π)²)`: spectral variance whose SM component has unit lengthscale.
pub const INIT_LOG_SPECTRAL_VAR: f64 = -3.6757541328186907;

/// Scale of a latent column under the `N(0, I)` prior.
pub const PRIOR_SCALE: f64 = 1.0;

/// Columns whose RMS is at most `tol_rel` times the reference scale
/// `max(largest column RMS, PRIOR_SCALE)`. The floor at the prior scale lets
/// a uniformly collapsed matrix, where every column has shrunk together,
/// count all of its columns.
pub fn count_zero_columns(x: &DenseMatrix, tol_rel: f64) -> usize {
    let rms = column_rms(x);
    let reference = rms.iter().copied().fold(PRIOR_SCALE, f64::max);
    rms.iter().filter(|&&r| r <= tol_rel * reference).count()
}

pub fn column_rms(x: &DenseMatrix) -> Vec<f64> {
    let n = x.rows().max(1) as f64;
    (0..x.cols())
        .map(|c| {
            let ss: f64 = (0..x.rows()).map(|r| x[(r, c)] * x[(r, c)]).sum();
            (ss / n).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub elbo: f64,
    pub term1: f64,
    pub term2: f64,
    pub sigma2: f64,
    pub zero_cols: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub const HEADER: &'static str = "iter,elbo,term1,term2,sigma2,zero_cols";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{}",
                r.iter, r.elbo, r.term1, r.term2, r.sigma2, r.zero_cols
            )
            .expect("write to string");
        }
        out
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

/// Everything needed to resume or inspect a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Rows `N` of the data.
    pub n: usize,
    /// Columns `M` of the data.
    pub m: usize,
    pub vp: VariationalParams,
    pub params: SmKernelParams,
    pub features: usize,
    pub adam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error("checkpoint io: {0}")]
    Io(String),
}

impl Checkpoint {
    pub const MAGIC: &'static [u8; 4] = b"AGLV";
    pub const VERSION: u32 = 1;

    /// Layout: magic, `u32` version, `u64` dims `(N, M, Q, m, L)`, then `f64`
    /// arrays `mu`, `log_s`, `log_weights`, `means`, `log_var`, `log_sigma2`,
    /// then Adam `step` (`u64`), `lr`, `beta1`, `beta2`, `eps`, and the
    /// moment vectors `m`, `v` in the same parameter order. Little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        for d in [
            self.n,
            self.m,
            self.vp.q(),
            self.params.components(),
            self.features,
        ] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let floats = pack(&self.vp, &self.params);
        for v in &floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        let hyper = [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps];
        for v in hyper.iter().chain(&self.adam.m).chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != Self::MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != Self::VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let [n, m, q, comps, features] = dims;
        let len = param_len(n, q, comps);
        let flat = r.f64s(len)?;
        let (vp, params) = unpack(&flat, n, q, comps);
        let step = r.u64()?;
        let [lr, beta1, beta2, eps] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let mm = r.f64s(len)?;
        let vv = r.f64s(len)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            n,
            m,
            vp,
            params,
            features,
            adam: AdamState {
                step,
                lr,
                beta1,
                beta2,
                eps,
                m: mm,
                v: vv,
            },
        })
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|e| CheckpointError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> std::result::Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(e.to_string()))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(k).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, k: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        if k.checked_mul(8).map_or(true, |b| b > self.bytes.len() - self.pos) {
            return Err(CheckpointError::Truncated);
        }
        (0..k).map(|_| self.f64()).collect()
    }
}

fn param_len(n: usize, q: usize, comps: usize) -> usize {
    2 * n * q + comps + 2 * comps * q + 1
}

/// Flattens parameters in checkpoint order.
fn pack(vp: &VariationalParams, params: &SmKernelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_len(vp.n(), vp.q(), params.components()));
    out.extend_from_slice(vp.mu.as_slice());
    out.extend_from_slice(vp.log_s.as_slice());
    out.extend_from_slice(&params.log_weights);
    out.extend_from_slice(params.means.as_slice());
    out.extend_from_slice(params.log_var.as_slice());
    out.push(params.log_sigma2);
    out
}

fn unpack(flat: &[f64], n: usize, q: usize, comps: usize) -> (VariationalParams, SmKernelParams) {
    let mut at = 0;
    let mut next = |len: usize| {
        let s = flat[at..at + len].to_vec();
        at += len;
        s
    };
    let mu = DenseMatrix::from_vec(n, q, next(n * q)).expect("sized");
    let log_s = DenseMatrix::from_vec(n, q, next(n * q)).expect("sized");
    let log_weights = next(comps);
    let means = DenseMatrix::from_vec(comps, q, next(comps * q)).expect("sized");
    let log_var = DenseMatrix::from_vec(comps, q, next(comps * q)).expect("sized");
    let log_sigma2 = next(1)[0];
    (
        VariationalParams { mu, log_s },
        SmKernelParams {
            log_weights,
            means,
            log_var,
            log_sigma2,
        },
    )
}

/// Column means over observed entries; hidden entries are replaced by them.
fn mean_filled(y: &DenseMatrix, mask: Option<&ObservationMask>) -> DenseMatrix {
    let Some(mask) = mask else { return y.clone() };
    let mut out = y.clone();
    for c in 0..y.cols() {
        let rows = mask.observed_rows(c);
        let mean = rows.iter().map(|&r| y[(r, c)]).sum::<f64>() / rows.len().max(1) as f64;
        for r in mask.hidden_rows(c) {
            out[(r, c)] = mean;
        }
    }
    out
}

/// Starting point: PCA means scaled to unit column variance, `S = 0.1·I`,
/// spectral means `~ N(0, 0.1²)`, spectral variances `1/(2π)²` (a unit
/// lengthscale in latent units), equal weights `1/m`, and `σ² = 0.1 ×` the
/// mean column variance (or the fixed value).
pub fn initialize(
    y: &DenseMatrix,
    config: &TrainConfig,
    mask: Option<&ObservationMask>,
) -> Result<(VariationalParams, SmKernelParams)> {
    let (n, m) = y.shape();
    let q = config.latent_dim;
    if q > n {
        return Err(TrainError::Config(format!("latent_dim {q} exceeds N = {n}")));
    }
    let filled = mean_filled(y, mask);
    let means: Vec<f64> = (0..m)
        .map(|c| (0..n).map(|r| filled[(r, c)]).sum::<f64>() / n as f64)
        .collect();
    let centered = DenseMatrix::from_fn(n, m, |r, c| filled[(r, c)] - means[c]);
    let eig = gram_eigs(&centered).map_err(|e| TrainError::Config(e.to_string()))?;
    let root_n = (n as f64).sqrt();
    let mu = DenseMatrix::from_fn(n, q, |r, c| eig.vectors[(r, c)] * root_n);

    let col_var: f64 = (0..m)
        .map(|c| (0..n).map(|r| centered[(r, c)].powi(2)).sum::<f64>() / n as f64)
        .sum::<f64>()
        / m as f64;
    let sigma2 = if config.learn_sigma2 {
        config.fixed_sigma2.unwrap_or(0.1 * col_var.max(1e-12))
    } else {
        config.fixed_sigma2.expect("validated")
    };

    let mut rng = rng_from_seed(derive_seed(config.seed, u64::MAX));
    let comps = config.components;
    let spec_means = DenseMatrix::from_vec(
        comps,
        q,
        standard_normals(&mut rng, comps * q).into_iter().map(|e| 0.1 * e).collect(),
    )
    .expect("sized");
    let params = SmKernelParams {
        log_weights: vec![(1.0 / comps as f64).ln(); comps],
        means: spec_means,
        log_var: DenseMatrix::filled(comps, q, INIT_LOG_SPECTRAL_VAR),
        log_sigma2: sigma2.ln(),
    };
    let vp = VariationalParams {
        mu,
        log_s: DenseMatrix::filled(n, q, 0.1f64.ln()),
    };
    Ok((vp, params))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub vp: VariationalParams,
    pub params: SmKernelParams,
    pub trace: TrainTrace,
    pub adam: AdamState,
    /// ELBO of every iteration, before its update.
    pub history: Vec<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, m: usize, features: usize) -> Checkpoint {
        Checkpoint {
            n: self.vp.n(),
            m,
            vp: self.vp.clone(),
            params: self.params.clone(),
            features,
            adam: self.adam.clone(),
        }
    }
}

/// Runs the optimization from [`initialize`].
pub fn train(y: &DenseMatrix, config: &TrainConfig, mask: Option<&ObservationMask>) -> Result<TrainOutcome> {
    config.validate()?;
    let (vp, params) = initialize(y, config, mask)?;
    train_from(y, config, mask, vp, params)
}

/// Runs the optimization from the given starting parameters.
pub fn train_from(
    y: &DenseMatrix,
    config: &TrainConfig,
    mask: Option<&ObservationMask>,
    vp: VariationalParams,
    params: SmKernelParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(mask) = mask {
        mask.check_shape(y.rows(), y.cols())
            .and_then(|_| mask.check_columns())
            .map_err(|e| ModelError::Likelihood(e.into()))?;
    }
    let (n, q, comps) = (vp.n(), vp.q(), params.components());
    let mut flat = pack(&vp, &params);
    let sigma2_at = flat.len() - 1;
    let mut adam = AdamState::new(flat.len(), config.lr, config.beta1, config.beta2, config.eps);
    let mut trace = TrainTrace::default();
    let mut history = Vec::with_capacity(config.iterations);
    let mut grads = vec![0.0; flat.len()];

    for t in 0..config.iterations {
        let (vp, params) = unpack(&flat, n, q, comps);
        let noise = draw_noise(n, q, comps, config.features, config.mc_samples, derive_seed(config.seed, t as u64));
        let g = elbo_with_gradient(y, &vp, &params, config.features, &noise, mask)?;
        let b = &g.breakdown;
        let finite = b.total.is_finite()
            && [&g.mu, &g.log_s, &g.means, &g.log_var].iter().all(|m| m.is_finite())
            && g.log_weights.iter().all(|v| v.is_finite())
            && g.log_sigma2.is_finite();
        if !finite {
            return Err(TrainError::NonFiniteObjective {
                iteration: t,
                last_good: Box::new(Checkpoint {
                    n,
                    m: y.cols(),
                    vp,
                    params,
                    features: config.features,
                    adam,
                }),
            });
        }
        history.push(b.total);
        if t % config.trace_every == 0 {
            trace.records.push(TraceRecord {
                iter: t,
                elbo: b.total,
                term1: b.term1,
                term2: b.term2,
                sigma2: params.sigma2(),
                zero_cols: count_zero_columns(&vp.mu, config.zero_col_tol),
            });
        }
        let mut at = 0;
        for src in [g.mu.as_slice(), g.log_s.as_slice(), &g.log_weights, g.means.as_slice(), g.log_var.as_slice()] {
            for v in src {
                grads[at] = -v;
                at += 1;
            }
        }
        grads[sigma2_at] = if config.learn_sigma2 { -g.log_sigma2 } else { 0.0 };
        adam_step(&mut adam, &mut flat, &grads)?;
        if !config.learn_sigma2 {
            flat[sigma2_at] = params.log_sigma2;
        }
    }

    let (vp, params) = unpack(&flat, n, q, comps);
    let fin = elbo_mc(
        y,
        &vp,
        &params,
        config.features,
        config.mc_samples,
        derive_seed(config.seed, config.iterations as u64),
        mask,
    )?;
    if !fin.total.is_finite() {
        return Err(TrainError::NonFiniteObjective {
            iteration: config.iterations,
            last_good: Box::new(Checkpoint {
                n,
                m: y.cols(),
                vp,
                params,
                features: config.features,
                adam,
            }),
        });
    }
    trace.records.push(TraceRecord {
        iter: config.iterations,
        elbo: fin.total,
        term1: fin.term1,
        term2: fin.term2,
        sigma2: params.sigma2(),
        zero_cols: count_zero_columns(&vp.mu, config.zero_col_tol),
    });
    Ok(TrainOutcome {
        vp,
        params,
        trace,
        adam,
        history,
    })
}
