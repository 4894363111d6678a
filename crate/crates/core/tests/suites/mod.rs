//! Checks shared by the per-topic test targets and the acceptance run.
#![allow(dead_code)]

pub mod adjacency;
pub mod gradients;
pub mod loss_oracle;
