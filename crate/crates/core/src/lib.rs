//! Regime identification from sparse sensors using libraries of dynamic
//! mode decompositions.
//!
//! The offline half builds a [`library::RegimeLibrary`] of DMD models, one
//! per operating regime. The online half senses a few components of the
//! state over `j + 1` consecutive steps, classifies the measurement against
//! the time-augmented observed library, and optionally reconstructs the full
//! state from the winning regime. [`metrics`] holds the alignment and
//! coherence diagnostics used to judge how separable a library is.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod dmd;
pub mod error;
pub mod library;
pub mod linalg;
pub mod metrics;
pub mod parallel;
pub mod sensing;
pub mod snapshots;
pub mod synthgen;

pub use error::{Error, ErrorClass, Result};
pub use parallel::Execution;
