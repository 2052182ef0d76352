use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ResolutionSchedule;

/// Every hyperparameter of a training run. Serialized into checkpoints and
/// read from TOML config files; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub lambda_adv: f64,
    pub lambda_style: f64,
    pub lambda_per: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    /// Discriminator (then generator) iterations per alternation window.
    pub k_alternation: usize,
    pub decay_period_epochs: usize,
    pub decay_factor: f64,
    pub early_stop_patience: usize,
    pub use_afrm: bool,
    pub use_cscm: bool,
    pub schedule: ResolutionSchedule,
    pub seed: u64,
    /// Epochs spent at each non-final stage before growing.
    pub epochs_per_stage: usize,
    /// Upper bound on epochs at the finest stage; early stopping usually
    /// ends the run first.
    pub max_final_epochs: usize,
    /// Apply style and perceptual terms at every active level instead of
    /// only the finest.
    pub style_all_levels: bool,
    /// Take Gram matrices of extractor features rather than of raw images.
    pub style_on_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 1.5,
            lambda_adv: 10.0,
            lambda_style: 250.0,
            lambda_per: 0.1,
            lr_generator: 1e-4,
            lr_discriminator: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 8,
            k_alternation: 1,
            decay_period_epochs: 100,
            decay_factor: 0.5,
            early_stop_patience: 10,
            use_afrm: true,
            use_cscm: true,
            schedule: ResolutionSchedule::default(),
            seed: 0,
            epochs_per_stage: 100,
            max_final_epochs: 1000,
            style_all_levels: false,
            style_on_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_adv", self.lambda_adv),
            ("lambda_style", self.lambda_style),
            ("lambda_per", self.lambda_per),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        let at_least_one = [
            ("batch_size", self.batch_size),
            ("k_alternation", self.k_alternation),
            ("decay_period_epochs", self.decay_period_epochs),
            ("early_stop_patience", self.early_stop_patience),
        ];
        for (name, v) in at_least_one {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.schedule.coarsest() % 16 != 0 {
            return Err(Error::Config(format!(
                "coarsest resolution must be a multiple of 16, got {}",
                self.schedule.coarsest()
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
