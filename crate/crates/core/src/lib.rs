//! Stein variational gradient descent and Stein variational Newton samplers.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod linsolve;
pub mod plot;
pub mod problems;
pub mod report;
pub mod svgd;
pub mod svn;

pub use error::{Error, Result};
