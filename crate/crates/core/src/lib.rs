//! Top-down transformer: bottom-up local attention over tokens, pooled
//! segment self-attention, and top-down token correction, on a small
//! reverse-mode autodiff engine.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod pooling;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
