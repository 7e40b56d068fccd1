//! Nonlinear Robust Pattern Matching (NRPM) layers and robustness reprogramming.
//!
//! The linear transform `z = Σ a_d·x_d` is the least-squares optimum of the
//! per-unit residuals `z/D − a_d·x_d`. Replacing the quadratic penalty with an
//! absolute one and unrolling a few Newton-IRLS steps yields a drop-in robust
//! alternative whose fixed point is `D·median{a_d·x_d}`. A per-layer mixing
//! weight λ blends the two, which lets a pretrained network be "reprogrammed"
//! for robustness without touching its weights.
//!
//! The crate is organized around that idea:
//!
//! - [`tensor`] — dense f64 tensors and a tape-based reverse-mode autodiff
//!   engine sufficient for everything below.
//! - [`pattern`] — the scalar core: LAD objective, localized upper bound,
//!   Newton-IRLS step, the unrolled estimator and the λ-hybrid.
//! - [`layers`] — hybrid dense and convolution layers (via unfolding), model
//!   assemblies, parameter init, activation traces and checkpoints.
//! - [`attack`] — FGSM and PGD under L∞ with exact budget/clip guarantees.
//! - [`influence`] — analytic influence functions of the linear and robust
//!   estimators plus a numerical contamination oracle.
//! - [`reprogram`] — the three reprogramming paradigms and the training loops.
//! - [`data`] — IDX ingestion, synthetic tasks, batching, CSV reports.
//! - [`cli`] — the subcommand pipeline behind the `nrpm` binary.
//!
//! See the `examples/` directory for one runnable program per capability, and
//! `tests/acceptance.rs` for the end-to-end verification suite.

pub mod attack;
pub mod check;
pub mod cli;
pub mod data;
pub mod influence;
pub mod layers;
pub mod pattern;
pub mod reprogram;
pub mod tensor;

pub use attack::{AttackKind, AttackSpec};
pub use layers::{HybridConvLayer, HybridDenseLayer, Model, ModelSpec};
pub use pattern::{LambdaParam, NrpmConfig, ProductVector};
pub use tensor::{Tape, Tensor};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or axis disagreement; carries both sides where applicable.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Operation left the numeric domain (division by an unstabilized zero,
    /// non-finite gradients, undefined weights).
    #[error("numeric-domain error: {0}")]
    Numeric(String),
    /// Invalid argument or inconsistent input data.
    #[error("validation error: {0}")]
    Validation(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
