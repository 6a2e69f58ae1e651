//! Relaxed compliance minimization over Airy potentials, the Michell limit
//! functional, and a laboratory for the lamination envelope of the
//! weight-penalized compliance density.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod airy;
pub mod cli;
pub mod constructions;
pub mod density;
pub mod envelope;
pub mod error;
pub mod grid;
pub mod solver;
pub mod sym2;

pub use error::{Error, Result};
pub use sym2::Sym2;
