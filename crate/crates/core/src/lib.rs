//! Shrinkage-debiased estimation of covariance resolvents `(Σ + λI)^{-1}` and
//! its use inside distributed Newton, distributed preconditioned conjugate
//! gradient and Iterative Hessian Sketch.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: SPD matrices, resolvents, effective dimension, seeded streams.
//! - [`estimators`]: averaging, shrinkage, small-regularizer and determinantal
//!   resolvent estimators.
//! - [`losses`]: ridge and logistic losses with Hessian-vector products.
//! - [`distributed`]: simulated coordinator/worker Newton and PCG.
//! - [`sketching`]: Gaussian sketches and Iterative Hessian Sketch.
//! - [`data`]: LIBSVM ingestion, standardization, one-hot and synthetic data.
//! - [`trajectory`]: line search, stopping rules and per-round records.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distributed;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod losses;
pub mod sketching;
pub mod trajectory;

pub use error::{Error, Result};
pub use linalg::{RngStream, SpdMatrix};
