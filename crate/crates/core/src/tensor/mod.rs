//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use array::Array;
pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};

/// Denominator clamp used by every norm in the crate.
pub const NORM_EPS: f64 = 1e-12;
