//! Semantic-aware 3D-aware portrait drawing generator.
//!
//! The crate is `no_std` + `alloc`: every model, loss, trainer and metric is
//! a pure function of tensors and parameters. File formats, image codecs, the
//! CLI and the HTTP service live in the `sage` companion crate.

#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adversaries;
pub mod applications;
pub mod data;
pub mod decoders;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod losses;
pub mod metrics;
mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod projector;
pub mod tensor;
pub mod training;
pub mod translator;

pub use error::{Error, Result};
pub use graph::{Graph, Trainable, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
