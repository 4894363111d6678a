//! Hierarchical graph convolution for image manipulation localization.
//!
//! A small residual encoder produces a four-level feature pyramid. Each level
//! is down-sampled, turned into a fully connected grid graph and passed
//! through a two-layer graph convolution. The graph features are mapped back
//! to convolutional space and fused into a top-down decoder that predicts a
//! per-pixel manipulation mask.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gcn;
pub mod graph;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod registry;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
