//! Command-line front end.
//!
//! Every option can come from a TOML file (`--config`) or a flag; flags win.
//! Top-level keys `seed` and `out` are shared, the rest live in a section per
//! subcommand:
//!
//! ```toml
//! seed = 3
//! out = "runs/a"
//!
//! [generate]
//! preset = "rbf"        # or "rbf-periodic"
//! n = 500
//! m = 100
//!
//! [train]
//! data = "runs/a/y.csv"
//! latent_dim = 5
//! iterations = 3000
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the working
//! directory. Exit codes: 0 success, 2 usage or input error, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_missing_mask, format_f64, load_labels, load_mask, load_matrix, make_s_curve_dataset, save_labels, save_mask,
    save_matrix, DataError,
};
use crate::dppca::{classify_regime, gram_eigs, DppcaReport};
use crate::eval::{
    affine_r2, impute_posterior_mean, impute_posterior_mean_mc, imputation_mse, knn_cv_accuracy, mean_imputation,
    EvalError, EvalReport,
};
use crate::kernels::BaseKernelConfig;
use crate::linalg::DenseMatrix;
use crate::model::ModelError;
use crate::trainer::{train, Checkpoint, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "gplvm", version, about = "Random-feature GP latent variable models")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample an S-curve dataset.
    Generate(GenerateOpts),
    /// Fit latents and kernel hyperparameters.
    Train(TrainOpts),
    /// Eigenspectrum and collapse regimes of the linear model.
    Diagnose(DiagnoseOpts),
    /// KNN accuracy and affine R² of latents.
    Eval(EvalOpts),
    /// Fill hidden entries from a trained checkpoint.
    Impute(ImputeOpts),
    /// SVG scatter and histograms of latents.
    Plot(PlotOpts),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Rbf,
    RbfPeriodic,
}

impl Preset {
    pub fn kernel(self) -> BaseKernelConfig {
        match self {
            Preset::Rbf => BaseKernelConfig::rbf_preset(),
            Preset::RbfPeriodic => BaseKernelConfig::rbf_periodic_preset(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeMethod {
    Exact,
    Mc,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOpts {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    /// Fraction of entries to hide; writes `mask.csv` when positive.
    #[arg(long)]
    pub missing: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// 0/1 CSV, 1 = observed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Defaults to true unless `fixed_sigma2` is set.
    #[arg(long)]
    pub learn_sigma2: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_sigma2: Option<f64>,
    #[arg(long)]
    pub zero_col_tol: Option<f64>,
    #[arg(long)]
    pub trace_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Noise variance for the report; defaults to the maximum-likelihood value.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Explicit σ² values for the regime table.
    #[arg(long, value_delimiter = ',')]
    pub sigma2_grid: Option<Vec<f64>>,
    /// Size of the default grid `k·2λ₁/(G+1)`, `k = 1..G`.
    #[arg(long)]
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOpts {
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Ground-truth latents for R².
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub knn: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub r2: Option<bool>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Complete matrix for the MSE report; defaults to `data`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<ImputeMethod>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotOpts {
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnose: Option<DiagnoseOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impute: Option<ImputeOpts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotOpts>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }
}

/// `flag.or(file)` for every listed field.
macro_rules! overlay {
    ($flags:expr, $file:expr; $($f:ident),+) => {{
        let file = $file.unwrap_or_default();
        let mut out = $flags.clone();
        $( if out.$f.is_none() { out.$f = file.$f; } )+
        out
    }};
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::KernelNotPD => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::RankDeficientDesign
            | EvalError::NotPositiveDefinite { .. }
            | EvalError::Linalg(_)
            | EvalError::Dppca(_) => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Checkpoint(_) | TrainError::Model(ModelError::Shape { .. }) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Numerical(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require<T>(v: Option<T>, key: &str, section: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("missing required key `{key}` (flag --{} or [{section}] {key})", key.replace('_', "-"))))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn color_allowed() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty()) && std::io::stderr().is_terminal()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let color = if color_allowed() {
        clap::ColorChoice::Auto
    } else {
        clap::ColorChoice::Never
    };
    let cmd = <Cli as clap::CommandFactory>::command().color(color);
    let cli = match cmd.try_get_matches_from(args).and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let prefix = if color_allowed() { "\x1b[31merror:\x1b[0m" } else { "error:" };
            eprintln!("{prefix} {}", e.message());
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    FileConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let file = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out = cli.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    match &cli.command {
        Command::Generate(o) => {
            let o = overlay!(o, file.generate; preset, n, m, noise_var, missing);
            cmd_generate(&o, seed, &out)
        }
        Command::Train(o) => {
            let o = overlay!(o, file.train; data, mask, iterations, lr, beta1, beta2, eps, components, features,
                latent_dim, mc_samples, learn_sigma2, fixed_sigma2, zero_col_tol, trace_every);
            cmd_train(&o, seed, &out)
        }
        Command::Diagnose(o) => {
            let o = overlay!(o, file.diagnose; data, latent_dim, sigma2, sigma2_grid, grid_points);
            cmd_diagnose(&o, &out)
        }
        Command::Eval(o) => {
            let o = overlay!(o, file.eval; latents, labels, truth, knn, r2, k, folds);
            cmd_eval(&o, seed, &out)
        }
        Command::Impute(o) => {
            let o = overlay!(o, file.impute; data, mask, checkpoint, truth, method, mc_samples);
            cmd_impute(&o, seed, &out)
        }
        Command::Plot(o) => {
            let o = overlay!(o, file.plot; latents, labels, bins);
            cmd_plot(&o, &out)
        }
    }
}

pub fn cmd_generate(o: &GenerateOpts, seed: u64, out: &Path) -> CliResult<()> {
    let preset = o.preset.unwrap_or(Preset::Rbf);
    let (n, m) = (o.n.unwrap_or(500), o.m.unwrap_or(100));
    let ds = make_s_curve_dataset(n, m, &preset.kernel(), o.noise_var.unwrap_or(0.01), seed)?;
    save_matrix(&out.join("y.csv"), &ds.y)?;
    save_matrix(&out.join("x_true.csv"), ds.x_true.as_ref().expect("synthetic truth"))?;
    save_labels(&out.join("labels.csv"), ds.labels.as_deref().expect("synthetic labels"))?;
    let p = o.missing.unwrap_or(0.0);
    if p > 0.0 {
        let masked = apply_missing_mask(&ds, p, seed)?;
        save_mask(&out.join("mask.csv"), masked.mask.as_ref().expect("mask applied"))?;
    }
    println!("generated {n}x{m} ({preset:?}) in {}", out.display());
    Ok(())
}

/// Resolved options with every default filled in.
pub fn train_config(o: &TrainOpts, seed: u64) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        iterations: o.iterations.unwrap_or(d.iterations),
        lr: o.lr.unwrap_or(d.lr),
        beta1: o.beta1.unwrap_or(d.beta1),
        beta2: o.beta2.unwrap_or(d.beta2),
        eps: o.eps.unwrap_or(d.eps),
        components: o.components.unwrap_or(d.components),
        features: o.features.unwrap_or(d.features),
        latent_dim: o.latent_dim.unwrap_or(d.latent_dim),
        mc_samples: o.mc_samples.unwrap_or(d.mc_samples),
        seed,
        learn_sigma2: o.learn_sigma2.unwrap_or(o.fixed_sigma2.is_none()),
        fixed_sigma2: o.fixed_sigma2,
        zero_col_tol: o.zero_col_tol.unwrap_or(d.zero_col_tol),
        trace_every: o.trace_every.unwrap_or(d.trace_every),
    }
}

/// A config file that reproduces a training run.
pub fn manifest(o: &TrainOpts, cfg: &TrainConfig, out: &Path) -> String {
    let echo = TrainOpts {
        data: o.data.clone(),
        mask: o.mask.clone(),
        iterations: Some(cfg.iterations),
        lr: Some(cfg.lr),
        beta1: Some(cfg.beta1),
        beta2: Some(cfg.beta2),
        eps: Some(cfg.eps),
        components: Some(cfg.components),
        features: Some(cfg.features),
        latent_dim: Some(cfg.latent_dim),
        mc_samples: Some(cfg.mc_samples),
        learn_sigma2: Some(cfg.learn_sigma2),
        fixed_sigma2: cfg.fixed_sigma2,
        zero_col_tol: Some(cfg.zero_col_tol),
        trace_every: Some(cfg.trace_every),
    };
    let file = FileConfig {
        seed: Some(cfg.seed),
        out: Some(out.to_path_buf()),
        train: Some(echo),
        ..FileConfig::default()
    };
    let body = toml::to_string(&file).expect("plain values serialize");
    format!("# gplvm train manifest {}\n{body}", env!("CARGO_PKG_VERSION"))
}

pub fn cmd_train(o: &TrainOpts, seed: u64, out: &Path) -> CliResult<()> {
    let data = require(o.data.as_ref(), "data", "train")?;
    let cfg = train_config(o, seed);
    cfg.validate()?;
    let y = load_matrix(data)?;
    let mask = o.mask.as_deref().map(load_mask).transpose()?;
    let start = Instant::now();
    let outcome = match train(&y, &cfg, mask.as_ref()) {
        Ok(r) => r,
        Err(TrainError::NonFiniteObjective { iteration, last_good }) => {
            last_good
                .save(&out.join("checkpoint.aglv"))
                .map_err(|e| usage(e.to_string()))?;
            return Err(CliError::Numerical(format!(
                "objective became non-finite at iteration {iteration}; last good state saved to checkpoint.aglv"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let wall = start.elapsed().as_secs_f64();
    outcome
        .checkpoint(y.cols(), cfg.features)
        .save(&out.join("checkpoint.aglv"))
        .map_err(|e| usage(e.to_string()))?;
    write_file(&out.join("trace.csv"), outcome.trace.to_csv())?;
    save_matrix(&out.join("latents.csv"), &outcome.vp.mu)?;
    write_file(&out.join("manifest.txt"), manifest(o, &cfg, out))?;
    let last = outcome.trace.last().expect("final record");
    println!(
        "elbo {:.6e}  sigma2 {:.4e}  zero_cols {}/{}",
        last.elbo, last.sigma2, last.zero_cols, cfg.latent_dim
    );
    eprintln!("trained in {wall:.2} s");
    Ok(())
}

/// Evenly spaced `k·2λ₁/(G+1)`, `k = 1..G`.
pub fn default_sigma2_grid(lambda1: f64, points: usize) -> Vec<f64> {
    (1..=points)
        .map(|k| k as f64 * 2.0 * lambda1 / (points + 1) as f64)
        .collect()
}

pub fn cmd_diagnose(o: &DiagnoseOpts, out: &Path) -> CliResult<()> {
    let data = require(o.data.as_ref(), "data", "diagnose")?;
    let q = o.latent_dim.unwrap_or(TrainConfig::default().latent_dim);
    let y = load_matrix(data)?;
    if q == 0 || q >= y.rows() {
        return Err(usage(format!("latent_dim must lie in 1..{}, got {q}", y.rows())));
    }
    let num = |e: crate::dppca::DppcaError| CliError::Numerical(e.to_string());
    let eig = gram_eigs(&y).map_err(num)?;
    let report = DppcaReport::new(&y, q, o.sigma2).map_err(num)?;

    let mut spectrum = String::from("index,eigenvalue\n");
    for (i, v) in eig.values.iter().enumerate() {
        let _ = writeln!(spectrum, "{},{}", i + 1, format_f64(*v));
    }
    write_file(&out.join("eigenspectrum.csv"), spectrum)?;
    write_file(&out.join("dppca_report.txt"), report.to_record())?;

    let grid = match &o.sigma2_grid {
        Some(g) => g.clone(),
        None => default_sigma2_grid(eig.values[0], o.grid_points.unwrap_or(20)),
    };
    let mut table = String::from("sigma2,regime,predicted_zero_cols\n");
    for s in grid {
        if !(s > 0.0 && s.is_finite()) {
            return Err(usage(format!("sigma2_grid values must be positive, got {s}")));
        }
        let call = classify_regime(&eig.values, s, q);
        let _ = writeln!(table, "{},{},{}", format_f64(s), call.regime, call.predicted_zero_cols);
    }
    write_file(&out.join("regimes.csv"), table)?;
    println!(
        "sigma2_hat {:.6e}  regime {}  predicted_zero_cols {}",
        report.sigma2_hat, report.regime, report.predicted_zero_cols
    );
    Ok(())
}

fn report_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn cmd_eval(o: &EvalOpts, seed: u64, out: &Path) -> CliResult<()> {
    let latents = require(o.latents.as_ref(), "latents", "eval")?;
    let x = load_matrix(latents)?;
    let (want_knn, want_r2) = match (o.knn, o.r2) {
        (None, None) => (o.labels.is_some(), o.truth.is_some()),
        (a, b) => (a.unwrap_or(false), b.unwrap_or(false)),
    };
    if !want_knn && !want_r2 {
        return Err(usage("nothing to evaluate: pass --knn with labels and/or --r2 with truth"));
    }
    let mut reports = Vec::new();
    if want_knn {
        let labels = load_labels(require(o.labels.as_ref(), "labels", "eval")?)?;
        let (k, folds) = (o.k.unwrap_or(1), o.folds.unwrap_or(5));
        reports.push(knn_cv_accuracy(&x, &labels, k, folds, seed)?);
    }
    if want_r2 {
        let truth = load_matrix(require(o.truth.as_ref(), "truth", "eval")?)?;
        reports.push(EvalReport {
            metric: "r2".into(),
            value: affine_r2(&x, &truth)?,
            stderr: 0.0,
            config: "affine".into(),
        });
    }
    write_file(&out.join("eval.csv"), report_csv(&reports))?;
    for r in &reports {
        println!("{} {:.6}", r.metric, r.value);
    }
    Ok(())
}

pub fn cmd_impute(o: &ImputeOpts, seed: u64, out: &Path) -> CliResult<()> {
    let y = load_matrix(require(o.data.as_ref(), "data", "impute")?)?;
    let ckpt_path = require(o.checkpoint.as_ref(), "checkpoint", "impute")?;
    let ckpt = Checkpoint::load(ckpt_path).map_err(|e| usage(format!("{}: {e}", ckpt_path.display())))?;
    let Some(mask_path) = o.mask.as_ref() else {
        return Err(EvalError::NoHiddenEntries.into());
    };
    let mask = load_mask(mask_path)?;
    if mask.hidden_count() == 0 {
        return Err(EvalError::NoHiddenEntries.into());
    }
    if ckpt.vp.n() != y.rows() {
        return Err(usage(format!(
            "checkpoint has {} rows, data has {}",
            ckpt.vp.n(),
            y.rows()
        )));
    }
    let imputed = match o.method.unwrap_or(ImputeMethod::Exact) {
        ImputeMethod::Exact => impute_posterior_mean(&y, &mask, &ckpt.vp.mu, &ckpt.params)?,
        ImputeMethod::Mc => impute_posterior_mean_mc(
            &y,
            &mask,
            &ckpt.vp.mu,
            &ckpt.params,
            ckpt.features,
            o.mc_samples.unwrap_or(100),
            seed,
        )?,
    };
    save_matrix(&out.join("imputed.csv"), &imputed)?;
    let truth = match &o.truth {
        Some(p) => load_matrix(p)?,
        None => y.clone(),
    };
    let mse = imputation_mse(&imputed, &truth, &mask)?;
    let base = imputation_mse(&mean_imputation(&y, &mask)?, &truth, &mask)?;
    let hidden = mask.hidden_count();
    let reports = [
        EvalReport {
            metric: "imputation_mse".into(),
            value: mse,
            stderr: 0.0,
            config: format!("hidden={hidden}"),
        },
        EvalReport {
            metric: "mean_baseline_mse".into(),
            value: base,
            stderr: 0.0,
            config: format!("hidden={hidden}"),
        },
    ];
    write_file(&out.join("impute_report.csv"), report_csv(&reports))?;
    println!("imputation_mse {mse:.6}  mean_baseline_mse {base:.6}");
    Ok(())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const SIZE: f64 = 400.0;
const MARGIN: f64 = 20.0;

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn scale_to(v: f64, (lo, hi): (f64, f64)) -> f64 {
    MARGIN + (v - lo) / (hi - lo) * (SIZE - 2.0 * MARGIN)
}

/// Scatter of the first two latent columns (or column 1 against row index).
/// Points are colored by label, or by row position when there are none.
pub fn scatter_svg(x: &DenseMatrix, labels: Option<&[i64]>) -> String {
    let n = x.rows();
    let xs: Vec<f64> = if x.cols() >= 2 { x.col(0) } else { (0..n).map(|i| i as f64).collect() };
    let ys: Vec<f64> = if x.cols() >= 2 { x.col(1) } else { x.col(0) };
    let (rx, ry) = (range(&xs), range(&ys));
    let classes: Vec<i64> = labels
        .map(|l| {
            let mut c = l.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        })
        .unwrap_or_default();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE:.0}\" height=\"{SIZE:.0}\" viewBox=\"0 0 {SIZE:.0} {SIZE:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for i in 0..n {
        let color = match labels {
            Some(l) => {
                let k = classes.binary_search(&l[i]).expect("label present");
                PALETTE[k % PALETTE.len()].to_string()
            }
            None => format!("hsl({:.1},70%,45%)", 270.0 * i as f64 / (n.max(2) - 1) as f64),
        };
        let _ = writeln!(
            s,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"{color}\"/>",
            scale_to(xs[i], rx),
            SIZE - scale_to(ys[i], ry),
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Histogram of one latent column with `bins` equal-width bars.
pub fn histogram_svg(values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = range(values);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let width = (SIZE - 2.0 * MARGIN) / bins as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE:.0}\" height=\"{SIZE:.0}\" viewBox=\"0 0 {SIZE:.0} {SIZE:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (b, &c) in counts.iter().enumerate() {
        let h = c as f64 / peak * (SIZE - 2.0 * MARGIN);
        let _ = writeln!(
            s,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#4c72b0\"/>",
            MARGIN + b as f64 * width,
            SIZE - MARGIN - h,
            width,
            h
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(o: &PlotOpts, out: &Path) -> CliResult<()> {
    let x = load_matrix(require(o.latents.as_ref(), "latents", "plot")?)?;
    let labels = o.labels.as_deref().map(load_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != x.rows() {
            return Err(usage(format!("{} labels for {} latent rows", l.len(), x.rows())));
        }
    }
    write_file(&out.join("scatter.svg"), scatter_svg(&x, labels.as_deref()))?;
    let bins = o.bins.unwrap_or(20);
    for c in 0..x.cols() {
        write_file(&out.join(format!("hist_{}.svg", c + 1)), histogram_svg(&x.col(c), bins))?;
    }
    println!("plotted {} points in {}", x.rows(), out.display());
    Ok(())
}
