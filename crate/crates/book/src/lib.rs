//! mdbook cannot test snippets that depend on workspace crates, so every
//! chapter is included here and checked by `cargo test --doc`.
//! One module per chapter keeps failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/kan.md")]
pub mod kan {}
#[doc = include_str!("../../../book/src/anchors.md")]
pub mod anchors {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/losses-metrics.md")]
pub mod losses_metrics {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
