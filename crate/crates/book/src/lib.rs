//! Guide code listings, compiled as doc-tests.
//!
//! mdbook cannot test listings that depend on external crates, so each
//! chapter is pulled in as the docs of an empty module and `cargo test`
//! runs its code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../../book/src/architecture.md")]
pub mod architecture {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
