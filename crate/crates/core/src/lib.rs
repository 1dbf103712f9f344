//! Score-based generative modeling through SDEs, and a defect detector that
//! compares whole-score (learned) and self-score (per-sample) reverse
//! trajectories started at several noise levels.
//!
//! Module map:
//!
//! - [`sde`]: VE / VP / sub-VP schedules, transition kernels, time grid.
//! - [`oracle`]: isotropic Gaussian mixtures with an exact marginal score.
//! - [`nn`]: score networks (MLP and a small conv encoder-decoder), feature
//!   taps, hand-written reverse-mode gradients and checkpoints.
//! - [`train`]: denoising score matching and Adam.
//! - [`integrator`]: Euler / Euler-Maruyama reverse steps on coupled
//!   whole/self trajectories, generation and reconstruction.
//! - [`detect`]: multi-scale anomaly maps and the ablation metrics.
//! - [`metrics`]: AUROC and NFE reporting.
//! - [`data`]: synthetic datasets and the on-disk formats.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod detect;
pub mod error;
pub mod exec;
pub mod integrator;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sde;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use sde::{SdeKind, SdeSpec};
pub use tensor::Tensor;
