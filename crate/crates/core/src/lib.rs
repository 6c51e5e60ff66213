//! Titration benchmark for probabilistic forecasters on shocked dynamical systems.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod conformal;
pub mod dynamics;
pub mod harness;
pub mod error;
pub mod refmodel;
pub mod rng;
pub mod stats;
pub mod titration;

pub use error::{Error, Result};
