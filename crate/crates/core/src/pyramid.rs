//! Pyramid of generators `G_1 … G_N` joined by cross-level skip connections.
//!
//! Level `n` owns its own encoder, a residual block of `3 + n` convolutions
//! at quarter resolution and an output head that upsamples back to the
//! level's resolution. Levels after the first receive the coarser image
//! twice: added to the sketch before encoding, and added to the head's
//! pre-activation as a residual path.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Mffe, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::feature::{downsample_pyramid, upsample_nearest, FeatureMap};
use crate::nn::{instance_norm, leaky_relu, Conv2d, Init, ParamStore};
use crate::schedule::ResolutionSchedule;

const HEAD_CHANNELS: [usize; 2] = [64, 32];
/// Seed stream reserved for generator layers (critics use another).
pub(crate) const GENERATOR_STREAM: u64 = 1;

/// Cross-level skip connection: `x + x ⊙ prev`, where `prev` is the coarser
/// generator's last residual feature (upsampled here if smaller).
pub fn cscm_fuse(x: &Tensor, prev: &Tensor, enabled: bool) -> Result<Tensor> {
    if !enabled {
        return Ok(x.clone());
    }
    let side = x.dims4()?.2;
    let prev = if prev.dims4()?.2 < side {
        upsample_nearest(prev, side)?
    } else {
        prev.clone()
    };
    if prev.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "skip feature {:?} does not match {:?}",
            prev.dims(),
            x.dims()
        )));
    }
    Ok((x + (x * prev)?)?)
}

/// Residual depth of level `n` (1-based).
pub fn residual_depth(n: usize) -> usize {
    3 + n
}

#[derive(Debug, Clone)]
pub struct GeneratorLevel {
    index: usize,
    resolution: usize,
    residual: Vec<Conv2d>,
    head: Vec<Conv2d>,
    output: Conv2d,
}

/// Result of one generator level.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    /// `Y_n`, `(b, 3, I_n, I_n)` in `[-1, 1]`.
    pub image: Tensor,
    /// `X'_n`, the residual block's output, `(b, 256, I_n/4, I_n/4)`.
    pub last_residual: Tensor,
}

impl GeneratorLevel {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        index: usize,
        resolution: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let residual = (0..residual_depth(index))
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.res{i}"),
                    FEATURE_CHANNELS,
                    FEATURE_CHANNELS,
                    3,
                    1,
                    1,
                    Init::GAN,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let mut head = Vec::new();
        let mut cin = FEATURE_CHANNELS;
        for (i, &cout) in HEAD_CHANNELS.iter().enumerate() {
            head.push(Conv2d::new(store, &format!("{prefix}.head{i}"), cin, cout, 3, 1, 1, Init::GAN, rng)?);
            cin = cout;
        }
        let output = Conv2d::new(store, &format!("{prefix}.out"), cin, 3, 3, 1, 1, Init::GAN, rng)?;
        Ok(Self {
            index,
            resolution,
            residual,
            head,
            output,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn residual_depth(&self) -> usize {
        self.residual.len()
    }

    /// `fused_input` is the encoder output (after the skip connection for
    /// `n ≥ 2`); `prev_image` is `Y_{n-1}`, required exactly when `n > 1`.
    pub fn forward(&self, fused_input: &Tensor, prev_image: Option<&Tensor>) -> Result<LevelOutput> {
        match (self.index, prev_image) {
            (1, Some(_)) => {
                return Err(Error::Protocol("level 1 takes no previous image".into()));
            }
            (n, None) if n > 1 => {
                return Err(Error::Protocol(format!("level {n} needs the level {} image", n - 1)));
            }
            _ => {}
        }
        let (_, c, h, _) = fused_input.dims4()?;
        if c != FEATURE_CHANNELS || h * 4 != self.resolution {
            return Err(Error::Shape(format!(
                "level {} expects (b, {FEATURE_CHANNELS}, {r}, {r}), got {:?}",
                self.index,
                fused_input.dims(),
                r = self.resolution / 4
            )));
        }

        let mut h = fused_input.clone();
        let last = self.residual.len() - 1;
        for (i, conv) in self.residual.iter().enumerate() {
            h = instance_norm(&conv.forward(&h)?)?;
            if i != last {
                h = leaky_relu(&h)?;
            }
        }
        let last_residual = (fused_input + h)?;

        let mut y = last_residual.clone();
        for conv in &self.head {
            let side = y.dims4()?.2 * 2;
            y = leaky_relu(&instance_norm(&conv.forward(&upsample_nearest(&y, side)?)?)?)?;
        }
        let mut pre = self.output.forward(&y)?;
        if let Some(prev) = prev_image {
            pre = (pre + upsample_nearest(prev, self.resolution)?)?;
        }
        Ok(LevelOutput {
            image: pre.tanh()?,
            last_residual,
        })
    }
}

/// Architecture switches shared by generator construction and checkpoint
/// loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub schedule: ResolutionSchedule,
    pub use_afrm: bool,
    pub use_cscm: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PyramidGenerator {
    spec: GeneratorSpec,
    store: ParamStore,
    encoders: Vec<Mffe>,
    levels: Vec<GeneratorLevel>,
}

impl PyramidGenerator {
    /// A generator with only level 1 built.
    pub fn new(spec: GeneratorSpec, dtype: DType) -> Result<Self> {
        let mut g = Self {
            spec,
            store: ParamStore::new(dtype),
            encoders: Vec::new(),
            levels: Vec::new(),
        };
        g.push_level()?;
        Ok(g)
    }

    /// A generator with `levels` levels built.
    pub fn with_levels(spec: GeneratorSpec, dtype: DType, levels: usize) -> Result<Self> {
        let mut g = Self::new(spec, dtype)?;
        while g.num_levels() < levels {
            g.grow()?;
        }
        Ok(g)
    }

    fn push_level(&mut self) -> Result<()> {
        let n = self.levels.len() + 1;
        let resolution = self.spec.schedule.resolution(n)?;
        let mut rng = level_rng(self.spec.seed, GENERATOR_STREAM, n);
        let prefix = format!("level{n}");
        let encoder = Mffe::new(&mut self.store, &format!("{prefix}.mffe"), self.spec.use_afrm, &mut rng)?;
        let level = GeneratorLevel::new(&mut self.store, &format!("{prefix}.gen"), n, resolution, &mut rng)?;
        self.encoders.push(encoder);
        self.levels.push(level);
        Ok(())
    }

    /// Appends the next level with fresh weights. Existing parameters are
    /// left untouched.
    pub fn grow(&mut self) -> Result<()> {
        if self.levels.len() >= self.spec.schedule.len() {
            return Err(Error::Growth(format!(
                "generator already has all {} levels",
                self.spec.schedule.len()
            )));
        }
        self.push_level()
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, n: usize) -> Option<&GeneratorLevel> {
        self.levels.get(n.checked_sub(1)?)
    }

    pub fn encoder(&self, n: usize) -> Option<&Mffe> {
        self.encoders.get(n.checked_sub(1)?)
    }

    fn check_active(&self, active: usize) -> Result<()> {
        if active == 0 || active > self.levels.len() {
            return Err(Error::Protocol(format!(
                "active levels must be in 1..={}, got {active}",
                self.levels.len()
            )));
        }
        Ok(())
    }

    /// Runs levels `1..=active` on a prebuilt sketch pyramid (coarsest
    /// first, one tensor per schedule level) and returns every level's
    /// output.
    pub fn forward_pyramid(&self, sketches: &[Tensor], active: usize) -> Result<Vec<LevelOutput>> {
        self.check_active(active)?;
        if sketches.len() < active {
            return Err(Error::Shape(format!(
                "{} sketch levels for {active} active levels",
                sketches.len()
            )));
        }
        let mut outputs: Vec<LevelOutput> = Vec::with_capacity(active);
        for n in 1..=active {
            let prev = outputs.last();
            let encoded = self.encoders[n - 1].forward(&sketches[n - 1], prev.map(|o| &o.image))?;
            let fused = match prev {
                Some(p) => cscm_fuse(&encoded.fused, &p.last_residual, self.spec.use_cscm)?,
                None => encoded.fused,
            };
            let out = self.levels[n - 1].forward(&fused, prev.map(|o| &o.image))?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Builds the sketch pyramid from a finest-resolution sketch and returns
    /// the image of every active level, finest last.
    pub fn forward_full(&self, sketch: &FeatureMap, active: usize) -> Result<Vec<FeatureMap>> {
        self.check_active(active)?;
        let pyramid = downsample_pyramid(sketch, &self.spec.schedule)?;
        let tensors: Vec<Tensor> = pyramid.into_iter().map(FeatureMap::into_tensor).collect();
        self.forward_pyramid(&tensors, active)?
            .into_iter()
            .map(|o| FeatureMap::image(o.image))
            .collect()
    }
}

pub(crate) fn level_rng(seed: u64, stream: u64, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream * 1024 + level as u64);
    rng
}
