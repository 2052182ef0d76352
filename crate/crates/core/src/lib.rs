//! Sketch-to-garment image translation with a progressive pyramid GAN.
//!
//! The model stacks one generator per resolution level. Each level encodes
//! the sketch with a convolution + bidirectional LSTM encoder, takes a
//! cross-level skip connection from the coarser generator, and refines the
//! coarser output. [`trainer`] grows the pyramid one level at a time;
//! [`metrics`] provides PSNR, SSIM, LPIPS and FID.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod data;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod feature;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pyramid;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
