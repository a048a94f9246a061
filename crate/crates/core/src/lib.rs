//! Simulation of full-batch first-order training of a perceptron on
//! Gaussian-mixture data, together with the Gaussian surrogate processes,
//! the dynamic mean-field (DMF) limit and its finite-size corrections.

// Index loops mirror the matrix formulas; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dmf;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod mixture;
pub mod perceptron;
pub mod refine;
pub mod rng;
pub mod surrogate;
pub mod trajectory;

pub use error::{Error, Result};
