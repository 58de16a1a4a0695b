pub mod ablate;
pub mod bench;
pub mod cli;
pub mod error;
pub mod rouge;

pub use error::{BenchError, Result};
