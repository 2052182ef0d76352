//! Checkpoint files.
//!
//! A checkpoint is one safetensors file. Its metadata holds a single key,
//! `haifit`, whose value is the JSON [`CheckpointManifest`]. Tensors are
//! named `generator.{param}`, `critic.{param}`, and
//! `adam.{generator|critic}.{m|v}.{param}` for the optimizer moments.
//! Safetensors orders tensors deterministically, so saving the same state
//! twice yields identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::critic::Critics;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamSteps};
use crate::pyramid::{GeneratorSpec, PyramidGenerator};
use crate::trainer::{EarlyStopping, TrainState};

pub const FORMAT: &str = "haifit-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "haifit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// The run's configuration as TOML.
    pub config: String,
    pub active_level: usize,
    pub epoch: usize,
    pub global_epoch: usize,
    pub iteration: u64,
    pub best_validation_ssim: Option<f64>,
    pub evaluations_since_improvement: usize,
    pub generator_steps: AdamSteps,
    pub critic_steps: AdamSteps,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Tensor>,
}

fn prefixed(prefix: &str, values: BTreeMap<String, Tensor>, out: &mut BTreeMap<String, Tensor>) {
    for (k, v) in values {
        out.insert(format!("{prefix}.{k}"), v);
    }
}

fn strip(prefix: &str, tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

fn expect_exact(kind: &str, expected: impl Iterator<Item = String>, found: &BTreeMap<String, Tensor>) -> Result<()> {
    let expected: std::collections::BTreeSet<String> = expected.collect();
    let extra: Vec<&String> = found.keys().filter(|k| !expected.contains(*k)).collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!("unexpected {kind} tensors: {extra:?}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        prefixed("generator", state.generator.params().snapshot()?, &mut tensors);
        prefixed("critic", state.critics.params().snapshot()?, &mut tensors);
        prefixed("adam.generator", state.opt_g.moment_tensors()?, &mut tensors);
        prefixed("adam.critic", state.opt_d.moment_tensors()?, &mut tensors);
        Ok(Self {
            manifest: CheckpointManifest {
                format: FORMAT.into(),
                version: FORMAT_VERSION,
                config: state.config.to_toml_string(),
                active_level: state.stage,
                epoch: state.epoch,
                global_epoch: state.global_epoch,
                iteration: state.iteration,
                best_validation_ssim: state.early_stop.best(),
                evaluations_since_improvement: state.early_stop.since_improvement(),
                generator_steps: state.opt_g.steps(),
                critic_steps: state.opt_d.steps(),
            },
            tensors,
        })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml_str(&self.manifest.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = HashMap::from([(
            METADATA_KEY.to_string(),
            serde_json::to_string(&self.manifest).expect("manifest serializes"),
        )]);
        safetensors::serialize(self.tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint("not a haifit checkpoint: manifest missing".into()))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?.into_iter().collect();
        Ok(Self { manifest, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn spec(config: &TrainConfig) -> GeneratorSpec {
        GeneratorSpec {
            schedule: config.schedule.clone(),
            use_afrm: config.use_afrm,
            use_cscm: config.use_cscm,
            seed: config.seed,
        }
    }

    /// The generator alone, for inference.
    pub fn generator(&self) -> Result<PyramidGenerator> {
        let config = self.config()?;
        let g = PyramidGenerator::with_levels(Self::spec(&config), DType::F32, self.manifest.active_level)?;
        let values = strip("generator", &self.tensors);
        expect_exact("generator", g.params().names().cloned(), &values)?;
        g.params().load(&values)?;
        Ok(g)
    }

    /// The full training state.
    pub fn into_state(self) -> Result<TrainState> {
        let config = self.config()?;
        let m = &self.manifest;
        let generator = self.generator()?;
        let critics = Critics::with_levels(config.schedule.clone(), config.seed, DType::F32, m.active_level)?;
        let values = strip("critic", &self.tensors);
        expect_exact("critic", critics.params().names().cloned(), &values)?;
        critics.params().load(&values)?;
        let opt_g = Adam::restore(
            config.adam_beta1,
            config.adam_beta2,
            &m.generator_steps,
            &strip("adam.generator", &self.tensors),
        )?;
        let opt_d = Adam::restore(config.adam_beta1, config.adam_beta2, &m.critic_steps, &strip("adam.critic", &self.tensors))?;
        Ok(TrainState {
            early_stop: EarlyStopping::resume(
                config.early_stop_patience,
                m.best_validation_ssim,
                m.evaluations_since_improvement,
            ),
            config,
            generator,
            critics,
            opt_g,
            opt_d,
            stage: m.active_level,
            epoch: m.epoch,
            global_epoch: m.global_epoch,
            iteration: m.iteration,
        })
    }
}
