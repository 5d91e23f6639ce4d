//! Simulator of stochastic-computing hardware for approximate matrix
//! arithmetic, with experiment harnesses that measure how the induced noise
//! propagates through gradient descent and neural-network training.
//!
//! The crate is organized around the hardware abstraction:
//!
//! - [`stochastic`] — bit-exact encode / AND-multiply / multiply-accumulate
//!   simulation of the stochastic datapath.
//! - [`noise`] — matrix arithmetic with exact, bit-simulated, and analytic
//!   Gaussian-noise backends, plus the closed-form error variances.
//! - [`optim`] — noisy gradient descent with learning-rate and bit-budget
//!   schedules, convergence bounds, and the accuracy/run-time sweep.
//! - [`mlp`] — a from-scratch multilayer perceptron whose compute kernels
//!   route through the noisy backends.
//! - [`data`] — IDX-format dataset ingestion and normalization.
//! - [`records`] — experiment record rows and deterministic CSV emission.

pub mod data;
pub mod error;
pub mod matrix;
pub mod mlp;
pub mod noise;
pub mod optim;
pub mod records;
pub mod rng;
pub mod stochastic;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use noise::{BackendMode, BitBudget, GemmBackend, RangeMode, VarianceMode};
pub use rng::RngState;
