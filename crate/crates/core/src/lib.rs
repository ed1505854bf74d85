pub mod augment;
pub mod buffer;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod localize;
pub mod model;
pub mod nn;
pub mod rng;
pub mod score;
pub mod synth;
pub mod train;

pub use buffer::{ImageBuffer, PixelMask};
pub use error::{Error, Result};
