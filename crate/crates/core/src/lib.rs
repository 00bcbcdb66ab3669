//! Radio coverage maps by Fixed Rank Kriging.
//!
//! Received power (dB) is modeled as
//! `Y(x) = t(x)'alpha + s(x)'eta + sigma eps(x)` with a log-distance trend
//! `t(x)`, compactly supported bi-square basis functions `s(x)`, a latent
//! vector `eta ~ N(0, K)` with exponential correlation between basis centers,
//! and white noise. All linear algebra on the N x N covariance is done through
//! r x r systems, so fitting is O(r^2 N + r^3) and prediction O(r^2) per point.
//!
//! Logarithms of distance are base 10 throughout: the trend column is
//! `-10 log10 dist(x)` and the path-loss exponent kappa multiplies it.

// `!(x > 0.0)` is used on purpose so that NaN fails parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod multicell;
pub mod prediction;
pub mod synthetic;
pub mod trend;

#[cfg(test)]
mod testing;

pub use error::{FrkError, Result};
