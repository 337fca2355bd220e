//! Estimation of a combined relationship (covariance) matrix from partially
//! overlapping relationship matrices, with genomic kernels, mixed-model
//! prediction, matrix completion and a simulation harness built around it.

// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod imputation;
pub mod io;
pub mod kernels;
pub mod matcore;
pub mod mixedmodel;
pub mod simlab;
pub mod wishart_em;

pub use error::{Error, Result};
pub use matcore::LabeledSymMatrix;
pub use wishart_em::{combine, EMConfig, EMResult, PartialSampleSet};
