//! Deep co-training for semi-supervised semantic segmentation.

pub mod adversarial;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
