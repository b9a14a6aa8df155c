//! Semi-supervised multi-task training for semantic segmentation and object
//! detection with invariant (FixMatch*) and equivariant (Dense FixMatch)
//! consistency.

pub mod augment;
pub mod data;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pseudolabel;

pub use error::{Error, Result};
