//! Operator-valued dyadic harmonic analysis on a finite window.

pub mod dyadic_model;
pub mod error;
pub mod hardy_atoms;
pub mod kernels_operators;
pub mod matrix_algebra;
pub mod stopping_czd;
pub mod weights;

pub use error::{Error, Result};
