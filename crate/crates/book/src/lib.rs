//! The guide in `book/` as a crate, so `cargo test --doc` runs every listing.
//! One module per chapter keeps failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/continual.md")]
pub mod continual {}
#[doc = include_str!("../../../book/src/dreaming.md")]
pub mod dreaming {}
#[doc = include_str!("../../../book/src/oracle.md")]
pub mod oracle {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}
#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}
