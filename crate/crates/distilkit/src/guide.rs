//! The book's chapters, included as doc-tested modules so
//! `cargo test --doc` compiles and runs every snippet in `book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}

#[doc = include_str!("../../../book/src/decoupling.md")]
pub mod decoupling {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/pseudolabels.md")]
pub mod pseudolabels {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/profiling.md")]
pub mod profiling {}
