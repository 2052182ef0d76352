//! Training objectives: L1, vanilla adversarial, Gram-matrix style and
//! multi-stage perceptual losses, and their weighted sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, NUM_STAGES};

/// Scores are clamped this far from 0 and 1 before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute difference.
pub fn l1_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(generated, target)?;
    Ok((generated - target)?.abs()?.mean_all()?)
}

fn checked_scores(scores: &Tensor) -> Result<Tensor> {
    let flat = scores.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = flat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("discriminator score {bad} outside [0, 1]")));
    }
    Ok(scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)?)
}

/// `-(mean log D(y) + mean log(1 - D(G(x))))`.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let real = checked_scores(real)?;
    let fake = checked_scores(fake)?;
    let a = real.log()?.mean_all()?;
    let b = fake.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((a + b)?.neg()?)
}

/// Non-saturating generator objective, `-mean log D(G(x))`.
pub fn generator_adversarial_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(checked_scores(fake)?.log()?.mean_all()?.neg()?)
}

/// `(d_loss, g_loss)` for one scale.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((discriminator_loss(real, fake)?, generator_adversarial_loss(fake)?))
}

/// Uniform average of per-scale losses.
pub fn mean_over_scales(losses: &[Tensor]) -> Result<Tensor> {
    if losses.is_empty() {
        return Err(Error::Config("no active scales".into()));
    }
    let n = losses.len() as f64;
    Ok((Tensor::stack(losses, 0)?.sum_all()? / n)?)
}

/// `F Fᵀ / (c h w)` per batch element, where `F` is the `c × hw` unfolding.
pub fn gram_matrix(feature: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    let f = feature.reshape((b, c, h * w))?;
    let g = f.matmul(&f.transpose(1, 2)?)?;
    Ok((g / (c * h * w) as f64)?)
}

/// Mean absolute difference of Gram matrices.
pub fn style_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(generated, target)?;
    Ok((gram_matrix(generated)? - gram_matrix(target)?)?.abs()?.mean_all()?)
}

/// Style loss over every extractor stage, averaged.
pub fn feature_style_loss(generated: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(generated, target)?;
    let fg = extractor.stages(generated)?;
    let ft = extractor.stages(&target.detach())?;
    let terms = fg.iter().zip(&ft).map(|(a, b)| style_loss(a, b)).collect::<Result<Vec<_>>>()?;
    mean_over_scales(&terms)
}

/// `Σ_i (1/N_i) ‖φ_i(y) − φ_i(G(x))‖₁` over the extractor's five stages.
pub fn perceptual_loss(generated: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(generated, target)?;
    let fg = extractor.stages(generated)?;
    let ft = extractor.stages(&target.detach())?;
    if fg.len() != NUM_STAGES {
        return Err(Error::Config(format!(
            "perceptual loss needs {NUM_STAGES} extractor stages, got {}",
            fg.len()
        )));
    }
    let terms = fg
        .iter()
        .zip(&ft)
        .map(|(a, b)| Ok((a - b)?.abs()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

/// Loss weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub adv: f64,
    pub style: f64,
    pub perceptual: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            l1: c.lambda_l1,
            adv: c.lambda_adv,
            style: c.lambda_style,
            perceptual: c.lambda_per,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        (&TrainConfig::default()).into()
    }
}

/// Logged values of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub adv: f64,
    pub style: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, adv: f64, style: f64, perceptual: f64, w: &LossWeights) -> Self {
        Self {
            l1,
            adv,
            style,
            perceptual,
            total: weighted_sum(l1, adv, style, perceptual, w),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l1, self.adv, self.style, self.perceptual, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `λ_l1·l1 + λ_adv·adv + λ_style·style + λ_per·perceptual`.
pub fn weighted_sum(l1: f64, adv: f64, style: f64, perceptual: f64, w: &LossWeights) -> f64 {
    w.l1 * l1 + w.adv * adv + w.style * style + w.perceptual * perceptual
}

/// Differentiable loss terms of one generator step.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub l1: Tensor,
    pub adv: Tensor,
    pub style: Tensor,
    pub perceptual: Tensor,
}

/// Weighted generator objective: the differentiable total plus its logged
/// breakdown.
pub fn total_generator_loss(terms: &GeneratorTerms, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let total = ((((&terms.l1 * w.l1)? + (&terms.adv * w.adv)?)? + (&terms.style * w.style)?)?
        + (&terms.perceptual * w.perceptual)?)?;
    let breakdown = LossBreakdown::new(
        scalar(&terms.l1)?,
        scalar(&terms.adv)?,
        scalar(&terms.style)?,
        scalar(&terms.perceptual)?,
        w,
    );
    Ok((total, breakdown))
}
