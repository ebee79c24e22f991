//! Eventful Transformers: vision-transformer blocks that recompute only the
//! tokens whose inputs changed noticeably since the previous frame.
//!
//! The building blocks are token [`gating`] (gates, delta gates, buffers),
//! incremental [`attention`] with sparse score and value-product updates,
//! and the [`block`]/[`model`] layers that wire them into a stream-stateful
//! transformer. [`cost`] counts operations, [`stream`] synthesizes inputs
//! and [`harness`] runs eventful models against dense oracles.

pub mod archive;
pub mod attention;
pub mod block;
pub mod cost;
pub mod equiv;
pub mod error;
pub mod gating;
pub mod harness;
pub mod index;
pub mod model;
pub mod rng;
pub mod stream;
pub mod tensor;

pub use block::{EventfulBlock, Mode};
pub use cost::{CostCounts, CostLedger};
pub use error::{Error, Result};
pub use gating::Policy;
pub use harness::{run_pair, RunConfig, RunReport};
pub use index::IndexSet;
pub use model::{EventfulModel, ModelConfig, ModelWeights};
pub use stream::StreamConfig;
pub use tensor::Matrix;
