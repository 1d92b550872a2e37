//! File formats, command implementations and the HTTP studio service for the
//! sage portrait-drawing generator. Models and training live in `sage-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod report;
pub mod service;

pub use error::{Error, Result};
