//! Numerical homogenization of deterministic optimal control in stationary
//! random media.
//!
//! The crate is organised bottom-up:
//!
//! * [`env`] builds seeded random potentials with an exact translation operator.
//! * [`model`] holds the controlled system `(f, L)` with its growth constants.
//! * [`cell`] solves endpoint-constrained cell problems and estimates the
//!   effective Lagrangian from their long-horizon averages.
//! * [`solve`] runs backward dynamic programming for the fine, macro-step and
//!   homogenized value functions, plus control surgery.
//! * [`xform`] computes Hamiltonians and a monotone HJB solver.

// `!(a >= b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod env;
pub mod error;
pub mod hash;
pub mod interp;
pub mod io;
pub mod model;
pub mod parallel;
pub mod solve;
pub mod vector;
pub mod xform;

pub use error::{Error, Result};
pub use vector::Vector;
