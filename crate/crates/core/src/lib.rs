//! Segmentation network construction kit.

pub mod arch;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
