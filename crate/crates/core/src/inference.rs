//! Frozen-model inference: sketch in, finest-level image out.

use std::path::Path;

use candle_core::DType;
use image::RgbImage;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::imageio::{decode_png_rgb, denormalize, encode_png, letterbox, normalize_rgb};
use crate::pyramid::PyramidGenerator;
use crate::schedule::ResolutionSchedule;

#[derive(Debug, Clone)]
pub struct Model {
    generator: PyramidGenerator,
    active: usize,
    fingerprint: String,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let generator = ckpt.generator()?;
        let fingerprint = generator.params().fingerprint()?;
        Ok(Self {
            active: ckpt.manifest.active_level,
            generator,
            fingerprint,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// SHA-256 of the generator parameters.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn schedule(&self) -> &ResolutionSchedule {
        &self.generator.spec().schedule
    }

    /// Resolution of the images this model produces.
    pub fn output_resolution(&self) -> usize {
        self.schedule().levels()[self.active - 1]
    }

    /// Letterboxes `sketch` to the schedule's finest resolution and returns
    /// the output of the finest trained level.
    pub fn generate(&self, sketch: &RgbImage) -> Result<RgbImage> {
        let boxed = letterbox(sketch, self.schedule().finest() as u32);
        let input = normalize_rgb(&boxed, DType::F32)?;
        let mut outputs = self.generator.forward_full(&input, self.active)?;
        let image = outputs.pop().expect("at least one level");
        Ok(denormalize(image.tensor())?.remove(0))
    }

    pub fn generate_png(&self, sketch_png: &[u8]) -> Result<Vec<u8>> {
        encode_png(&self.generate(&decode_png_rgb(sketch_png)?)?)
    }
}
