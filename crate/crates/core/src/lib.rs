//! Selective replay for class-incremental learning on temporal graphs.
//!
//! When a new period arrives, old-class nodes active in that period are
//! scored by the previous period's frozen model. A greedy procedure picks a
//! replay subset that has low classification loss and low squared MMD to the
//! old-class data, plus a second subset chosen purely for distribution
//! coverage. Training then combines cross-entropy on new-class data, on the
//! replay subset, and a kernel alignment term that pulls replay embeddings
//! toward the frozen coverage subset.

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod rng;
pub mod selector;
pub mod trainer;

pub use error::{Error, Result};
