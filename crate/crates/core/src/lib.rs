//! Debiased average ridge estimation of heterogeneous taxable-income
//! elasticities over piecewise-linear budget sets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod budget;
pub mod cli_io;
pub mod error;
pub mod estimator;
mod linalg;
pub mod synthetic;

pub use error::{Error, Result};
