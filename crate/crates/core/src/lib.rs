//! Moment-based estimation of non-Gaussian structural VARs with adaptive
//! ridge shrinkage toward short-run zero restrictions.
//!
//! The usual flow: [`var_reduced::fit_var`] for residuals,
//! [`estimator::estimate_csue`] for the unrestricted fit,
//! [`tuning::ridge_pipeline`] for weights, cross-validated `λ` and the ridge
//! fit, then [`inference`] for responses and bands.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod labeling;
pub mod moments;
pub mod optim;
pub mod simulation;
pub mod tuning;
pub mod var_reduced;

pub use error::{Result, SvarError};
