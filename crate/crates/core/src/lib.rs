//! Absolute camera pose regression with two attention encoders over a
//! shared convolutional backbone, trained with a small reverse-mode autodiff
//! engine in `f64`.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
