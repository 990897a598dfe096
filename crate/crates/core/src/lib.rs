//! Robust quantile regression for small dense networks.
//!
//! The crate provides four ways of fitting a conditional α-quantile:
//!
//! - plain quantile regression (mean pinball loss),
//! - least-trimmed quantile regression, which keeps only the smallest-error
//!   samples at every step,
//! - case-specific shift regression, where every observation carries an
//!   L1-penalised offset `γ_i` updated by a proximal step,
//! - β-robust quantile regression, which replaces the pinball loss with the
//!   saturating loss `(1 - exp(-β ρ_α(r/σ))) / β`.
//!
//! Models are tiny feed-forward networks ([`net::Mlp`]) trained with ADAM.
//! [`data`] holds the bundled CYG OB1 star-cluster data and a synthetic
//! heteroscedastic generator, [`eval`] the comparison metrics.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod net;
pub mod rng;
pub mod scaler;
pub mod trainers;

pub use error::{Error, Result};
