//! Numerical toolkit for weakly asymmetric exclusion with slow bonds and its
//! Cole–Hopf transform.

// Index loops mirror the lattice formulas; `!(x >= 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod comparison;
pub mod error;
pub mod gartner;
pub mod harness;
pub mod heat_kernel;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
