//! Rehearsal-free continual video action recognition with decoupled
//! prompt-adapter tuning on a frozen transformer backbone.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod prompt;
pub mod tensor;
pub mod trainer;

pub use error::{DpatError, Result};
pub use tensor::Tensor;
