pub mod checkpoint;
pub mod config;
pub mod cyclegan;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod localization;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod syndiff;
pub mod training;

pub use error::{Error, Result};
