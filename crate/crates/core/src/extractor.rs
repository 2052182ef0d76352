//! Frozen multi-stage feature extractors used by the perceptual loss, LPIPS
//! and FID.
//!
//! Two profiles exist. The test profile is a fixed, randomly initialised
//! five-stage convolution stack whose weights ship with the crate, so every
//! loss and metric runs offline and deterministically. The production
//! profile is VGG-16 loaded from a user-supplied safetensors file using
//! torchvision's `features.{idx}` parameter names.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::area_downsample;
use crate::nn::{conv2d, Init, ParamStore};

pub const NUM_STAGES: usize = 5;

/// Weights of the test-profile extractor.
const TEST_PROFILE: &[u8] = include_bytes!("../fixtures/extractor-v1.safetensors");
pub const TEST_PROFILE_VERSION: &str = "1";
pub(crate) const TEST_PROFILE_SEED: u64 = 0x5eed_0001;
const TEST_PROFILE_CHANNELS: [usize; NUM_STAGES + 1] = [3, 8, 16, 32, 32, 32];

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Feature maps of every stage for a `(b, 3, h, w)` batch in `[-1, 1]`.
    fn stages(&self, images: &Tensor) -> Result<Vec<Tensor>>;

    /// Globally averaged final-stage features, `(b, d)`, for FID.
    fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        let last = self
            .stages(images)?
            .pop()
            .ok_or_else(|| Error::Config("extractor produced no stages".into()))?;
        Ok(last.mean(3)?.mean(2)?)
    }
}

fn halve(x: &Tensor, max_pool: bool) -> Result<Tensor> {
    let side = x.dims4()?.2;
    if side < 2 {
        return Ok(x.clone());
    }
    if max_pool {
        Ok(x.max_pool2d(2)?)
    } else {
        area_downsample(x, side / 2)
    }
}

/// The test profile: stage `i` is an (average-pool, then) 3×3 convolution
/// followed by `tanh`.
#[derive(Debug, Clone)]
pub struct ConvStackExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl ConvStackExtractor {
    /// Loads the bundled test-profile weights in `dtype`.
    pub fn test_profile(dtype: DType) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(TEST_PROFILE)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let version = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("version"))
            .map(String::as_str);
        if version != Some(TEST_PROFILE_VERSION) {
            return Err(Error::Config(format!(
                "extractor fixture version {version:?}, expected {TEST_PROFILE_VERSION}"
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(TEST_PROFILE, &Device::Cpu)?;
        Self::from_tensors(&tensors, dtype)
    }

    fn from_tensors(tensors: &HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let layers = (0..NUM_STAGES)
            .map(|i| {
                let get = |k: &str| {
                    tensors
                        .get(&format!("stage{i}.{k}"))
                        .ok_or_else(|| Error::Config(format!("extractor is missing stage{i}.{k}")))
                        .and_then(|t| Ok(t.to_dtype(dtype)?))
                };
                Ok((get("weight")?, get("bias")?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Regenerates the test-profile weights from their seed.
    pub fn generate(seed: u64) -> Result<(Self, HashMap<String, Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F32);
        for i in 0..NUM_STAGES {
            let (cin, cout) = (TEST_PROFILE_CHANNELS[i], TEST_PROFILE_CHANNELS[i + 1]);
            let std = (1.0 / (cin * 9) as f64).sqrt() * 1.5;
            store.create(&format!("stage{i}.weight"), &[cout, cin, 3, 3], Init::Normal { std }, &mut rng)?;
            store.create(&format!("stage{i}.bias"), &[cout], Init::Normal { std: 0.1 }, &mut rng)?;
        }
        let tensors: HashMap<String, Tensor> = store.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        Ok((Self::from_tensors(&tensors, DType::F32)?, tensors))
    }

    /// Writes freshly generated test-profile weights to `path`.
    pub fn write_fixture(path: &Path) -> Result<()> {
        let (_, tensors) = Self::generate(TEST_PROFILE_SEED)?;
        let meta = HashMap::from([("version".to_string(), TEST_PROFILE_VERSION.to_string())]);
        let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

impl FeatureExtractor for ConvStackExtractor {
    fn name(&self) -> &str {
        "conv-stack-v1"
    }

    fn stages(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = images.clone();
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = halve(&x, false)?;
            }
            x = conv2d(&x, w, Some(b), 1, 1)?.tanh()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// VGG-16 convolution indices inside torchvision's `features` sequential,
/// grouped by block. Each block's last ReLU output is one stage.
const VGG16_BLOCKS: [&[usize]; NUM_STAGES] = [&[0, 2], &[5, 7], &[10, 12, 14], &[17, 19, 21], &[24, 26, 28]];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub struct Vgg16Extractor {
    blocks: Vec<Vec<(Tensor, Tensor)>>,
    mean: Tensor,
    std: Tensor,
}

impl Vgg16Extractor {
    /// Loads `features.{idx}.weight` / `.bias` tensors from a safetensors
    /// file.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::from_tensors(&tensors, dtype)
    }

    pub fn from_tensors(tensors: &HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let blocks = VGG16_BLOCKS
            .iter()
            .map(|idxs| {
                idxs.iter()
                    .map(|i| {
                        let get = |k: &str| {
                            let name = format!("features.{i}.{k}");
                            tensors
                                .get(&name)
                                .ok_or_else(|| Error::Config(format!("VGG-16 weights are missing {name}")))
                                .and_then(|t| Ok(t.to_dtype(dtype)?))
                        };
                        Ok((get("weight")?, get("bias")?))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let d = Device::Cpu;
        Ok(Self {
            blocks,
            mean: Tensor::new(&IMAGENET_MEAN, &d)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?,
            std: Tensor::new(&IMAGENET_STD, &d)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?,
        })
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn name(&self) -> &str {
        "vgg16"
    }

    fn stages(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let unit = ((images + 1.0)? * 0.5)?;
        let mut x = unit.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = halve(&x, true)?;
            }
            for (w, b) in block {
                x = conv2d(&x, w, Some(b), 1, 1)?.relu()?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}
