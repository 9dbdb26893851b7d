//! A desk-scale laboratory for UNet blind denoisers.

pub mod cli;
pub mod data;
pub mod divergence;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod representation;
pub mod sampler;
pub mod seed;
pub mod stats;
pub mod trainer;
pub mod unet;

pub use error::{LabError, Result};
