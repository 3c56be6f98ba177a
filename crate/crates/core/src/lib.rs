//! Gaussian process latent variable model with a spectral-mixture kernel
//! approximated by random Fourier features.
//!
//! The model lives in [`model`] and is fitted by [`trainer`]. [`dppca`] holds
//! the closed-form analysis of the linear-kernel case, [`eval`] scores
//! latents and imputes hidden entries, and [`cli`] is the command-line front
//! end. [`linalg`] and [`autodiff`] are the dense matrix and reverse-mode
//! gradient layers everything else is built on.
//!
//! ```
//! use gplvm::data::make_s_curve_dataset;
//! use gplvm::kernels::BaseKernelConfig;
//! use gplvm::trainer::{train, TrainConfig};
//!
//! let ds = make_s_curve_dataset(30, 4, &BaseKernelConfig::rbf_preset(), 0.01, 1).unwrap();
//! let cfg = TrainConfig { iterations: 20, latent_dim: 2, ..Default::default() };
//! let out = train(&ds.y, &cfg, None).unwrap();
//! assert_eq!(out.vp.mu.shape(), (30, 2));
//! ```

pub mod autodiff;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod mask;
pub mod rng;
pub mod model;
pub mod dppca;
pub mod trainer;
pub mod data;
pub mod eval;
pub mod cli;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/collapse.md")]
    mod collapse {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
