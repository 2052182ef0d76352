//! Multi-scale feature fusion encoder.
//!
//! A shallow convolution stack extracts contour features at quarter
//! resolution. A bidirectional two-layer LSTM reads a four-part
//! decomposition of those features pooled to 4×4, and the two are fused
//! as `zeta * contour + intent` with a learnable `zeta` starting at 1.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::{area_downsample, upsample_nearest};
use crate::nn::{instance_norm, leaky_relu, Conv2d, Init, Lstm, ParamStore};

pub const FEATURE_CHANNELS: usize = 256;
pub const INTENT_SIDE: usize = 4;
pub const NUM_PARTS: usize = 4;
pub const PART_DIM: usize = FEATURE_CHANNELS * INTENT_SIDE * INTENT_SIDE / NUM_PARTS;
const LSTM_LAYERS: usize = 2;

/// Input to level `n`'s encoder: the sketch alone at the coarsest level,
/// otherwise the sketch plus the coarser level's image upsampled
/// (nearest-neighbour) to the sketch resolution.
pub fn level_input_fuse(sketch: &Tensor, prev_output: Option<&Tensor>) -> Result<Tensor> {
    let Some(prev) = prev_output else {
        return Ok(sketch.clone());
    };
    let (_, _, h, w) = sketch.dims4()?;
    let (pb, pc, ph, _) = prev.dims4()?;
    let up = if ph < h { upsample_nearest(prev, h)? } else { prev.clone() };
    if up.dims() != sketch.dims() {
        return Err(Error::Shape(format!(
            "previous output {:?} does not match sketch {:?}",
            (pb, pc, ph),
            (sketch.dims()[0], sketch.dims()[1], h, w)
        )));
    }
    Ok((sketch + up)?)
}

/// Shallow convolution module: stride 2, stride 2, stride 1 convolutions
/// (3→64→128→256), each followed by instance norm and leaky ReLU.
#[derive(Debug, Clone)]
pub struct Scm {
    convs: Vec<Conv2d>,
}

impl Scm {
    pub fn new(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = [(3, 64, 2), (64, 128, 2), (128, FEATURE_CHANNELS, 1)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Conv2d::new(store, &format!("{prefix}.conv{i}"), cin, cout, 3, stride, 1, Init::GAN, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// `(b, 3, m, m)` → `(b, 256, m/4, m/4)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ChannelCount(c));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("resolution {h}x{w} is not divisible by 4")));
        }
        let mut y = x.clone();
        for conv in &self.convs {
            y = leaky_relu(&instance_norm(&conv.forward(&y)?)?)?;
        }
        Ok(y)
    }
}

/// Four ordered `(b, 1024)` chunks of a `(b, 256, 4, 4)` feature.
#[derive(Debug, Clone)]
pub struct IntentSequence {
    parts: Vec<Tensor>,
}

impl IntentSequence {
    pub fn new(parts: Vec<Tensor>) -> Result<Self> {
        if parts.len() != NUM_PARTS {
            return Err(Error::Sequence(parts.len()));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[Tensor] {
        &self.parts
    }

    /// The flattened `(b, 4096)` source vector.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&self.parts, 1)?)
    }

    /// Inverse of [`sequence_split`].
    pub fn reassemble(&self) -> Result<Tensor> {
        let flat = self.concat()?;
        let b = flat.dims()[0];
        Ok(flat.reshape((b, FEATURE_CHANNELS, INTENT_SIDE, INTENT_SIDE))?)
    }

    /// The same parts in reverse order.
    pub fn reversed(&self) -> Self {
        Self {
            parts: self.parts.iter().rev().cloned().collect(),
        }
    }
}

/// Flattens each `(256, 4, 4)` element in row-major `(c, h, w)` order and
/// cuts it into four contiguous 1024-value parts, so part `j` covers
/// channels `64j .. 64j + 63` at all 16 positions.
pub fn sequence_split(x: &Tensor) -> Result<IntentSequence> {
    let (b, c, h, w) = x.dims4()?;
    if c != FEATURE_CHANNELS || h != INTENT_SIDE || w != INTENT_SIDE {
        return Err(Error::Shape(format!(
            "sequence split needs (b, 256, 4, 4), got {:?}",
            x.dims()
        )));
    }
    let flat = x.reshape((b, NUM_PARTS * PART_DIM))?;
    let parts = (0..NUM_PARTS)
        .map(|j| Ok(flat.narrow(1, j * PART_DIM, PART_DIM)?.contiguous()?))
        .collect::<Result<_>>()?;
    IntentSequence::new(parts)
}

/// Abstract feature representation module: forward- and reverse-order
/// two-layer LSTMs over the four parts, stacked on channels and reduced by a
/// 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Afrm {
    direct: Lstm,
    reverse: Lstm,
    reduce: Conv2d,
    prefix: String,
}

impl Afrm {
    pub fn new(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            direct: Lstm::new(store, &format!("{prefix}.dir"), PART_DIM, PART_DIM, LSTM_LAYERS, rng)?,
            reverse: Lstm::new(store, &format!("{prefix}.rev"), PART_DIM, PART_DIM, LSTM_LAYERS, rng)?,
            reduce: Conv2d::new(
                store,
                &format!("{prefix}.reduce"),
                2 * FEATURE_CHANNELS,
                FEATURE_CHANNELS,
                1,
                1,
                0,
                Init::GAN,
                rng,
            )?,
            prefix: prefix.to_string(),
        })
    }

    /// Step outputs of both branches. Reverse-branch outputs are re-aligned
    /// to the original part positions.
    pub fn branch_outputs(&self, seq: &IntentSequence) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let direct = self.direct.forward(seq.parts())?;
        let mut reverse = self.reverse.forward(seq.reversed().parts())?;
        reverse.reverse();
        Ok((direct, reverse))
    }

    /// `(b, 256, 4, 4)` intent feature.
    pub fn forward(&self, seq: &IntentSequence) -> Result<Tensor> {
        let (direct, reverse) = self.branch_outputs(seq)?;
        let direct = IntentSequence::new(direct)?.reassemble()?;
        let reverse = IntentSequence::new(reverse)?.reassemble()?;
        let stacked = Tensor::cat(&[direct, reverse], 1)?;
        self.reduce.forward(&stacked)
    }

    /// Copies the direct branch's weights into the reverse branch.
    pub fn tie_reverse_to_direct(&self, store: &ParamStore) -> Result<()> {
        let dir_prefix = format!("{}.dir.", self.prefix);
        let rev_prefix = format!("{}.rev.", self.prefix);
        for (name, var) in store.iter() {
            if let Some(rest) = name.strip_prefix(&dir_prefix) {
                let target = store
                    .get(&format!("{rev_prefix}{rest}"))
                    .ok_or_else(|| Error::Config(format!("no reverse twin for {name}")))?;
                target.set(var.as_tensor())?;
            }
        }
        Ok(())
    }
}

/// Intermediate results of one encoder pass.
#[derive(Debug, Clone)]
pub struct MffeOutput {
    /// `x̃`, contour features at `m/4`.
    pub contour: Tensor,
    /// `x̄` upsampled to `m/4`; absent when the AFRM is disabled.
    pub intent: Option<Tensor>,
    /// The fused embedding handed to the generator.
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Mffe {
    scm: Scm,
    afrm: Option<Afrm>,
    zeta: Option<Var>,
}

impl Mffe {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        use_afrm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let scm = Scm::new(store, &format!("{prefix}.scm"), rng)?;
        let (afrm, zeta) = if use_afrm {
            let afrm = Afrm::new(store, &format!("{prefix}.afrm"), rng)?;
            let zeta = store.create(&format!("{prefix}.zeta"), &[1], Init::Const(1.0), rng)?;
            (Some(afrm), Some(zeta))
        } else {
            (None, None)
        };
        Ok(Self { scm, afrm, zeta })
    }

    pub fn scm(&self) -> &Scm {
        &self.scm
    }

    pub fn afrm(&self) -> Option<&Afrm> {
        self.afrm.as_ref()
    }

    pub fn zeta(&self) -> Option<&Var> {
        self.zeta.as_ref()
    }

    /// Encodes the sketch (plus the coarser image, if any) to
    /// `(b, 256, m/4, m/4)`.
    pub fn forward(&self, sketch: &Tensor, prev_output: Option<&Tensor>) -> Result<MffeOutput> {
        let x = level_input_fuse(sketch, prev_output)?;
        let contour = self.scm.forward(&x)?;
        let (Some(afrm), Some(zeta)) = (&self.afrm, &self.zeta) else {
            return Ok(MffeOutput {
                fused: contour.clone(),
                contour,
                intent: None,
            });
        };
        let side = contour.dims()[2];
        let pooled = area_downsample(&contour, INTENT_SIDE)?;
        let intent = upsample_nearest(&afrm.forward(&sequence_split(&pooled)?)?, side)?;
        let fused = contour.broadcast_mul(zeta.as_tensor())?.add(&intent)?;
        Ok(MffeOutput {
            contour,
            intent: Some(intent),
            fused,
        })
    }
}
