//! Joint smooth-plus-sparse inversion with flexible generalized Krylov methods.

// Negated comparisons deliberately treat NaN as a failed check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod fggk;
pub mod linalg;
pub mod mm;
pub mod operators;
pub mod problems;
pub mod projected;
pub mod regparam;
pub mod solvers;

pub use error::{Error, Result};
