//! Stability analysis for triangular nonlinear systems with a constant state
//! delay: Lyapunov certificates, gain conditions, high-gain observers,
//! delay-differential simulation and rational decay bounds.

// `!(x > 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod certify;
pub mod ddesim;
pub mod error;
pub mod exprlang;
pub mod matops;
pub mod sysmodel;

pub use error::{Error, Result};
