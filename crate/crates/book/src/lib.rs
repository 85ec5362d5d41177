//! The guide in `book/src`, compiled chapter by chapter so every snippet runs
//! under `cargo test --doc`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/targets.md")]
pub mod targets {}

#[doc = include_str!("../../../book/src/kernels.md")]
pub mod kernels {}

#[doc = include_str!("../../../book/src/svgd.md")]
pub mod svgd {}

#[doc = include_str!("../../../book/src/svn.md")]
pub mod svn {}

#[doc = include_str!("../../../book/src/cg.md")]
pub mod cg {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
