//! Exact beta-mixing coefficients, large-deviation bound evaluators for sums
//! of the form `sum_k f(X_k, X_t)`, and functional kernel regression with
//! dynamic forecasts.
//!
//! The crate is organized bottom-up:
//!
//! - [`mixing`]: exact alpha/beta coefficients on finite models and exact
//!   checks of the Davydov- and Ibragimov-type covariance inequalities.
//! - [`process`]: seeded simulators for contractive Markov chains and
//!   functional AR(1) curves, plus regression samples built on them.
//! - [`concentration`]: closed-form bound evaluators, the truncation
//!   decomposition, and Monte Carlo tail / Laplace transform estimators.
//! - [`regression`]: kernels, small-ball probabilities, the kernel
//!   regression estimator and the dynamic forecast experiment.
//! - [`experiment`]: config-driven suites and report writers used by the
//!   `betamix` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concentration;
pub mod error;
pub mod experiment;
pub mod io;
pub mod mixing;
pub mod process;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
