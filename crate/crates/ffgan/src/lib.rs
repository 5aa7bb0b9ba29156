//! Dataset files, run configuration, checkpoints, training, evaluation and
//! visualization around `ffgan-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod harness;
pub mod train;
pub mod visualize;

pub use config::RunConfig;
pub use error::{Error, Result};
