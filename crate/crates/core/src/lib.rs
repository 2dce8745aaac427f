//! Learning using privileged information for binary segmentation.
//!
//! A teacher UNet sees three-channel enhanced patches (raw, histogram
//! equalized, contrast stretched); a student UNet sees only the raw channel
//! and is trained against an alpha-blend of the ground-truth cross-entropy
//! and the cross-entropy to the frozen teacher's probabilities.

pub mod error;
pub mod imaging;
pub mod nn;

pub use error::{Error, Result};
pub mod dataset;
pub mod synthetic;
pub mod unet;
pub mod training;
pub mod evaluation;
