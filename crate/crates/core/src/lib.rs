//! Variable-metric proximal ADMM with runtime-certified convergence bounds.

// `!(a <= b)` is used on purpose so that NaN fails a check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod error;
pub mod hpe;
pub mod linalg;
pub mod problems;
pub mod schedule;

pub use error::{Error, Result};
