//! Class-incremental continual learning in which spare classifier heads are
//! pre-trained on dream classes: images from a frozen generator whose soft
//! prompt was optimized, under the guidance of a learned stopping oracle,
//! until the classifier begins to recognise them as an unseen class.
//!
//! [`pipeline::run_pipeline`] runs one seed end to end. The `d2l` binary and
//! the guide in `book/` cover everyday use.

pub mod assets;
pub mod cl;
pub mod config;
pub mod cost;
pub mod dreaming;
pub mod error;
pub mod features;
pub mod generator;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod replay;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{Graph, Tensor, Var};
