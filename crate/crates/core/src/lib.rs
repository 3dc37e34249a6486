//! Kernel quantile regression fitted by accelerated proximal gradient descent
//! on a smoothed check loss, with an exact finite-smoothing certificate and a
//! joint non-crossing estimator for several quantile levels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod backend;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod linalg;
pub mod loss;
pub mod model_file;
pub mod nckqr;
pub mod oracle;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use kernel::{KernelKind, KernelMatrix, KernelModel, KernelSpec};
pub use loss::{Coefficients, QuantileLevel};
