//! Audio-driven lip-synchronized talking-face generation with a conditional
//! video diffusion model.

pub mod codec;
pub mod conditions;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod masking;
pub mod media;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod synth;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
