//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Values are row-major: the last axis is contiguous, so flattening a
//! `[C, H, W]` map visits `(i, j)` cells with `j` varying fastest.

mod array;
pub(crate) mod kernels;
mod params;
mod tape;

pub use array::{Tensor, TensorError};
pub use params::{Binding, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Standard normal CDF, `Phi(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    kernels::normal_cdf(x)
}
