//! Progressive training: alternate discriminator and generator updates at
//! one resolution, grow both networks by a level, repeat, then keep
//! training at the finest level until validation SSIM stops improving.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::critic::Critics;
use crate::data::SketchImagePair;
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::feature::{downsample_pyramid, FeatureMap};
use crate::imageio::to_planes;
use crate::losses::{
    discriminator_loss, feature_style_loss, generator_adversarial_loss, l1_loss, mean_over_scales, perceptual_loss,
    style_loss, total_generator_loss, GeneratorTerms, LossBreakdown, LossWeights,
};
use crate::metrics::ssim;
use crate::optim::Adam;
use crate::pyramid::{GeneratorSpec, LevelOutput, PyramidGenerator};

/// Learning rate after `epoch` completed epochs:
/// `base · factor^⌊epoch / period⌋`.
pub fn decayed_lr(base: f64, epoch: usize, period: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / period) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive evaluations without a strictly
/// higher score.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self::resume(patience, None, 0)
    }

    pub fn resume(patience: usize, best: Option<f64>, since_improvement: usize) -> Self {
        Self {
            patience,
            best,
            since_improvement,
        }
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        match self.best {
            Some(b) if score <= b => self.since_improvement += 1,
            _ => {
                self.best = Some(score);
                self.since_improvement = 0;
            }
        }
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn since_improvement(&self) -> usize {
        self.since_improvement
    }
}

/// One log line per optimization iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub epoch: usize,
    pub iter: u64,
    pub l1: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub style: f64,
    pub per: f64,
    pub total: f64,
    #[serde(rename = "lr_G")]
    pub lr_g: f64,
    #[serde(rename = "lr_D")]
    pub lr_d: f64,
}

/// Collects iteration records and optionally streams them as JSON lines.
#[derive(Debug, Default)]
pub struct TrainLog {
    writer: Option<BufWriter<File>>,
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn jsonl(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: Some(BufWriter::new(file)),
            records: Vec::new(),
        })
    }

    fn push(&mut self, record: IterationRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("train log", e))?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Everything a run needs to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: PyramidGenerator,
    pub critics: Critics,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Number of active levels.
    pub stage: usize,
    /// Epochs completed within the current stage.
    pub epoch: usize,
    /// Epochs completed over the whole run; drives learning-rate decay.
    pub global_epoch: usize,
    pub iteration: u64,
    pub early_stop: EarlyStopping,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = GeneratorSpec {
            schedule: config.schedule.clone(),
            use_afrm: config.use_afrm,
            use_cscm: config.use_cscm,
            seed: config.seed,
        };
        Ok(Self {
            generator: PyramidGenerator::new(spec, DType::F32)?,
            critics: Critics::new(config.schedule.clone(), config.seed, DType::F32)?,
            opt_g: Adam::new(config.adam_beta1, config.adam_beta2),
            opt_d: Adam::new(config.adam_beta1, config.adam_beta2),
            stage: 1,
            epoch: 0,
            global_epoch: 0,
            iteration: 0,
            early_stop: EarlyStopping::new(config.early_stop_patience),
            config,
        })
    }

    pub fn resolution(&self) -> usize {
        self.config.schedule.levels()[self.stage - 1]
    }

    pub fn is_final_stage(&self) -> bool {
        self.stage == self.config.schedule.len()
    }

    pub fn lr_generator(&self) -> f64 {
        decayed_lr(
            self.config.lr_generator,
            self.global_epoch,
            self.config.decay_period_epochs,
            self.config.decay_factor,
        )
    }

    pub fn lr_discriminator(&self) -> f64 {
        decayed_lr(
            self.config.lr_discriminator,
            self.global_epoch,
            self.config.decay_period_epochs,
            self.config.decay_factor,
        )
    }

    /// Adds the next level to both networks. Existing parameters and their
    /// optimizer moments are kept and keep training.
    pub fn grow(&mut self) -> Result<()> {
        self.generator.grow()?;
        self.critics.grow()?;
        self.stage += 1;
        self.epoch = 0;
        Ok(())
    }

    /// Generator outputs of every active level for a sketch pyramid.
    pub fn generate(&self, sketches: &[Tensor]) -> Result<Vec<LevelOutput>> {
        self.generator.forward_pyramid(sketches, self.stage)
    }
}

/// Per-pair pyramids computed once and reused every epoch.
#[derive(Debug, Clone)]
pub struct PreparedData {
    sketches: Vec<Vec<Tensor>>,
    photos: Vec<Vec<Tensor>>,
}

impl PreparedData {
    pub fn new(pairs: &[SketchImagePair], config: &TrainConfig) -> Result<Self> {
        let finest = config.schedule.finest();
        let mut sketches = Vec::with_capacity(pairs.len());
        let mut photos = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.resolution() != finest {
                return Err(Error::Shape(format!(
                    "pair {} is {}², schedule ends at {finest}²",
                    p.id,
                    p.resolution()
                )));
            }
            let pyr = |m: &FeatureMap| -> Result<Vec<Tensor>> {
                Ok(downsample_pyramid(m, &config.schedule)?
                    .into_iter()
                    .map(FeatureMap::into_tensor)
                    .collect())
            };
            sketches.push(pyr(&p.sketch)?);
            photos.push(pyr(&p.photo)?);
        }
        Ok(Self { sketches, photos })
    }

    pub fn len(&self) -> usize {
        self.sketches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.is_empty()
    }

    /// Per-level batch tensors for the pairs at `indices`.
    fn batch(&self, indices: &[usize], levels: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let gather = |src: &Vec<Vec<Tensor>>| -> Result<Vec<Tensor>> {
            (0..levels)
                .map(|l| {
                    let parts: Vec<Tensor> = indices.iter().map(|&i| src[i][l].clone()).collect();
                    Ok(Tensor::cat(&parts, 0)?)
                })
                .collect()
        };
        Ok((gather(&self.sketches)?, gather(&self.photos)?))
    }
}

/// Frozen feature networks used by the generator objective.
pub struct LossContext<'a> {
    pub extractor: &'a dyn FeatureExtractor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Discriminator objective averaged over active levels. `fakes` should be
/// detached from the generator graph.
pub fn critic_objective(critics: &Critics, photos: &[Tensor], fakes: &[Tensor]) -> Result<Tensor> {
    let losses = fakes
        .iter()
        .enumerate()
        .map(|(i, fake)| {
            let n = i + 1;
            discriminator_loss(&critics.discriminate(&photos[i], n)?, &critics.discriminate(fake, n)?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(&losses)
}

/// Generator objective: L1 and adversarial terms averaged over active
/// levels; style and perceptual terms at the finest active level (or at
/// every level when configured).
pub fn generator_objective(
    config: &TrainConfig,
    critics: &Critics,
    photos: &[Tensor],
    fakes: &[Tensor],
    ctx: &LossContext,
) -> Result<(Tensor, LossBreakdown)> {
    let active = fakes.len();
    let mut l1 = Vec::with_capacity(active);
    let mut adv = Vec::with_capacity(active);
    let mut style = Vec::new();
    let mut per = Vec::new();
    for (i, fake) in fakes.iter().enumerate() {
        l1.push(l1_loss(fake, &photos[i])?);
        adv.push(generator_adversarial_loss(&critics.discriminate(fake, i + 1)?)?);
        if config.style_all_levels || i + 1 == active {
            style.push(if config.style_on_features {
                feature_style_loss(fake, &photos[i], ctx.extractor)?
            } else {
                style_loss(fake, &photos[i])?
            });
            per.push(perceptual_loss(fake, &photos[i], ctx.extractor)?);
        }
    }
    let terms = GeneratorTerms {
        l1: mean_over_scales(&l1)?,
        adv: mean_over_scales(&adv)?,
        style: mean_over_scales(&style)?,
        perceptual: mean_over_scales(&per)?,
    };
    total_generator_loss(&terms, &LossWeights::from(config))
}

fn non_finite(state: &TrainState, detail: String) -> Error {
    Error::NonFiniteLoss {
        stage: state.stage,
        epoch: state.epoch,
        iteration: state.iteration as usize,
        detail,
    }
}

/// Phase hooks for observing the alternation, used by the freeze checks.
pub trait PhaseObserver {
    fn after_critic_phase(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
    fn after_generator_phase(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl PhaseObserver for () {}

/// One epoch at the current stage. The epoch's batches are processed in
/// windows of `k`: `k` discriminator updates with the generator fixed,
/// then `k` generator updates with the discriminators fixed.
pub fn train_stage(
    state: &mut TrainState,
    data: &PreparedData,
    ctx: &LossContext,
    log: &mut TrainLog,
    observer: &mut dyn PhaseObserver,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let k = state.config.k_alternation;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
    rng.set_stream(state.global_epoch as u64);
    order.shuffle(&mut rng);
    let batches: Vec<Vec<usize>> = order.chunks(state.config.batch_size).map(<[usize]>::to_vec).collect();
    let (lr_g, lr_d) = (state.lr_generator(), state.lr_discriminator());

    for window in batches.chunks(k) {
        let mut pending = Vec::with_capacity(window.len());
        for indices in window {
            let (sketches, photos) = data.batch(indices, state.stage)?;
            let fakes: Vec<Tensor> = state.generate(&sketches)?.into_iter().map(|o| o.image).collect();
            let detached: Vec<Tensor> = fakes.iter().map(Tensor::detach).collect();
            let d_loss = critic_objective(&state.critics, &photos, &detached)?;
            let adv_d = scalar(&d_loss)?;
            if !adv_d.is_finite() {
                return Err(non_finite(state, format!("discriminator loss {adv_d}")));
            }
            state.opt_d.step(state.critics.params(), &d_loss.backward()?, lr_d)?;
            pending.push((sketches, photos, fakes, adv_d));
        }
        observer.after_critic_phase(state)?;
        for (j, (sketches, photos, fakes, adv_d)) in pending.into_iter().enumerate() {
            // The generator is unchanged until its first update in this
            // window, so the first batch can reuse its forward pass.
            let fakes = if j == 0 {
                fakes
            } else {
                state.generate(&sketches)?.into_iter().map(|o| o.image).collect()
            };
            let (g_loss, b) = generator_objective(&state.config, &state.critics, &photos, &fakes, ctx)?;
            if !b.is_finite() {
                return Err(non_finite(state, format!("{b:?}")));
            }
            state.opt_g.step(state.generator.params(), &g_loss.backward()?, lr_g)?;
            log.push(IterationRecord {
                stage: state.stage,
                epoch: state.epoch,
                iter: state.iteration,
                l1: b.l1,
                adv_g: b.adv,
                adv_d,
                style: b.style,
                per: b.perceptual,
                total: b.total,
                lr_g,
                lr_d,
            })?;
            state.iteration += 1;
        }
        observer.after_generator_phase(state)?;
    }
    state.epoch += 1;
    state.global_epoch += 1;
    Ok(())
}

/// Mean SSIM between generated and real images at the current stage's
/// resolution.
pub fn validation_ssim(state: &TrainState, data: &PreparedData) -> Result<f64> {
    let mut total = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(state.config.batch_size) {
        let (sketches, photos) = data.batch(chunk, state.stage)?;
        let out = state.generate(&sketches)?;
        let fake = &out.last().expect("at least one level").image;
        let real = &photos[state.stage - 1];
        for (f, r) in to_planes(fake)?.iter().zip(to_planes(real)?.iter()) {
            total += ssim(f, r)?;
        }
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: usize,
    pub epoch: usize,
    pub validation_ssim: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
    pub early_stopped: bool,
}

/// Where stage checkpoints go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
}

impl Outputs {
    pub fn stage_checkpoint(&self, stage: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("stage{stage}.safetensors")))
    }

    pub fn early_stop_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("early-stop.safetensors"))
    }

    pub fn final_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("final.safetensors"))
    }
}

/// Trains every stage of the schedule. Non-final stages run
/// `epochs_per_stage` epochs; the final stage runs until early stopping or
/// `max_final_epochs`. Validation uses `validation`, or the training pairs
/// when it is empty.
pub fn progressive_train(
    config: TrainConfig,
    train: &[SketchImagePair],
    validation: &[SketchImagePair],
    ctx: &LossContext,
    outputs: &Outputs,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    let data = PreparedData::new(train, &config)?;
    let val = if validation.is_empty() {
        data.clone()
    } else {
        PreparedData::new(validation, &config)?
    };
    let mut state = TrainState::new(config)?;
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut early_stopped = false;
    let stages = state.config.schedule.len();
    loop {
        let budget = if state.is_final_stage() {
            state.config.max_final_epochs
        } else {
            state.config.epochs_per_stage
        };
        while state.epoch < budget {
            train_stage(&mut state, &data, ctx, log, &mut ())?;
            let mut summary = EpochSummary {
                stage: state.stage,
                epoch: state.epoch,
                validation_ssim: None,
            };
            if state.is_final_stage() {
                let score = validation_ssim(&state, &val)?;
                summary.validation_ssim = Some(score);
                log::info!("stage {} epoch {}: validation ssim {score:.4}", state.stage, state.epoch);
                if state.early_stop.observe(score) == StopDecision::Stop {
                    early_stopped = true;
                }
            }
            epochs.push(summary);
            if early_stopped {
                break;
            }
        }
        let path = if early_stopped {
            outputs.early_stop_checkpoint()
        } else {
            outputs.stage_checkpoint(state.stage)
        };
        if let Some(path) = path {
            Checkpoint::from_state(&state)?.save(&path)?;
            checkpoints.push(path);
        }
        if state.stage == stages || early_stopped {
            break;
        }
        state.grow()?;
        log::info!("grew to stage {} ({}²)", state.stage, state.resolution());
    }
    Ok(TrainOutcome {
        state,
        epochs,
        checkpoints,
        early_stopped,
    })
}
