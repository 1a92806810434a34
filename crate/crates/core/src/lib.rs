//! Constraint-based pre-training with shared weight templates.
//!
//! A transformer's primary weight matrices are aggregated into one unified
//! matrix `W` (one row per layer) and constrained to a Kronecker composition
//! `W = Σᵢ Tᵢ ⊗ Sᵢ` of `N` shared templates `Tᵢ` (1×r₁r₂ vectors holding
//! size-agnostic knowledge) and lightweight per-size scalers `Sᵢ` (L×B
//! matrices). Training updates templates and scalers only; `W` is always
//! reconstructed. A model of a new depth/width is initialized by freezing the
//! templates, resizing them by truncation/tiling, and training just the
//! scalers on a small data subset.
//!
//! Module map:
//! - [`linalg`] — dense matrices, Kronecker product, one-sided Jacobi SVD,
//!   seeded RNG.
//! - [`autodiff`] — reverse-mode tape over matrix ops, enough to drive a
//!   tiny transformer loss.
//! - [`factorization`] — templates, scalers, the rearrangement bijection,
//!   SVD-optimal fitting, and the Kronecker adjoint rules.
//! - [`scaling`] — structured template masks and width adaptation.
//! - [`packing`] — named per-layer weights ⇄ unified matrix.
//! - [`nn`] — desk-scale transformer, loss, Adam, synthetic data.
//! - [`pipeline`] — constrained pre-training, scaler-only adaptation,
//!   target materialization, unconstrained baseline.
//! - [`analysis`] — singular spectra, minimal template count for a target
//!   error, empirical Lipschitz estimates, generalization-gap bounds.
//! - [`io`] — bank/scaler container format, run configs, history files.

pub mod analysis;
pub mod autodiff;
pub mod factorization;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod packing;
pub mod pipeline;
pub mod scaling;

pub use linalg::{Matrix, Rng, SvdResult};
