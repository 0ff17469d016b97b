//! Density-aware point-cloud semantic segmentation.

pub mod density;
pub mod error;
pub mod infer;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pcio;
pub mod spatial;
pub mod subsample;
pub mod train;

pub use error::{Error, Result};
