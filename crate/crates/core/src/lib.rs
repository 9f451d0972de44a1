//! Diffusion-based temporal action segmentation and long-term anticipation.

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
