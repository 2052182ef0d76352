//! Per-level patch discriminators.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, sigmoid, Conv2d, Init, ParamStore};
use crate::pyramid::level_rng;
use crate::schedule::ResolutionSchedule;

const CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub(crate) const CRITIC_STREAM: u64 = 2;

/// Four stride-2 convolutions (64→128→256→512) with instance norm after all
/// but the first, then a 1-channel convolution and a sigmoid.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    index: usize,
    resolution: usize,
    convs: Vec<Conv2d>,
    score: Conv2d,
}

impl PatchDiscriminator {
    fn new(store: &mut ParamStore, index: usize, resolution: usize, seed: u64) -> Result<Self> {
        let mut rng = level_rng(seed, CRITIC_STREAM, index);
        let prefix = format!("level{index}");
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}.conv{i}"), cin, cout, 4, 2, 1, Init::GAN, &mut rng)?);
            cin = cout;
        }
        let score = Conv2d::new(store, &format!("{prefix}.score"), cin, 1, 3, 1, 1, Init::GAN, &mut rng)?;
        Ok(Self {
            index,
            resolution,
            convs,
            score,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.convs.iter().chain(std::iter::once(&self.score))
    }

    /// Per-patch realness probabilities, `(b, 1, r/16, r/16)`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "discriminator {} expects (b, 3, {r}, {r}), got {:?}",
                self.index,
                image.dims(),
                r = self.resolution
            )));
        }
        let mut y = image.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            // A 1×1 map has no spatial statistics to normalise.
            if i > 0 && y.dims4()?.2 > 1 {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y)?;
        }
        sigmoid(&self.score.forward(&y)?)
    }
}

/// One discriminator per active pyramid level.
#[derive(Debug, Clone)]
pub struct Critics {
    schedule: ResolutionSchedule,
    seed: u64,
    store: ParamStore,
    levels: Vec<PatchDiscriminator>,
}

impl Critics {
    pub fn new(schedule: ResolutionSchedule, seed: u64, dtype: DType) -> Result<Self> {
        let mut c = Self {
            schedule,
            seed,
            store: ParamStore::new(dtype),
            levels: Vec::new(),
        };
        c.grow()?;
        Ok(c)
    }

    pub fn with_levels(schedule: ResolutionSchedule, seed: u64, dtype: DType, levels: usize) -> Result<Self> {
        let mut c = Self::new(schedule, seed, dtype)?;
        while c.len() < levels {
            c.grow()?;
        }
        Ok(c)
    }

    /// Adds the discriminator for the next schedule level.
    pub fn grow(&mut self) -> Result<()> {
        let n = self.levels.len() + 1;
        if n > self.schedule.len() {
            return Err(Error::Growth(format!(
                "critics already cover all {} levels",
                self.schedule.len()
            )));
        }
        let r = self.schedule.resolution(n)?;
        let d = PatchDiscriminator::new(&mut self.store, n, r, self.seed)?;
        self.levels.push(d);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn level(&self, n: usize) -> Option<&PatchDiscriminator> {
        self.levels.get(n.checked_sub(1)?)
    }

    /// Scores `image` with discriminator `n` (1-based).
    pub fn discriminate(&self, image: &Tensor, n: usize) -> Result<Tensor> {
        self.level(n)
            .ok_or_else(|| Error::Protocol(format!("no discriminator for level {n}")))?
            .forward(image)
    }
}
