//! Run configuration: one TOML file with a schema version covering the
//! models, losses, augmentation controller and optimizer settings.

use crate::ada::AdaState;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_mapping: f64,
    pub ema_decay: f64,
    /// Steps between checkpoint writes (a final checkpoint is always
    /// written).
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub sample_interval: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossConfig,
    pub ada: AdaState,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            epochs: 100,
            batch_size: 24,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            lr_generator: 2e-4,
            lr_discriminator: 6e-4,
            lr_mapping: 2e-6,
            ema_decay: 0.999,
            checkpoint_interval: 1000,
            log_interval: 1,
            sample_interval: 500,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossConfig::default(),
            ada: AdaState::default(),
        }
    }
}

impl TrainingConfig {
    /// Small preset for smoke tests: 3-stage generator at 32x32 with a
    /// 3-block discriminator.
    pub fn tiny_smoke() -> Self {
        let mut generator = GeneratorConfig::tiny(3, 16);
        generator.base_resolution = 8;
        TrainingConfig {
            epochs: 1,
            batch_size: 8,
            generator,
            discriminator: DiscriminatorConfig::tiny(&[16, 24, 32], 6),
            checkpoint_interval: 200,
            sample_interval: 200,
            ..TrainingConfig::default()
        }
    }

    pub fn resolution(&self) -> usize {
        self.generator.output_resolution()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_mapping", self.lr_mapping),
        ] {
            if lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        // Discriminator must be able to process generator output.
        let div = self.discriminator.total_downsample();
        if self.resolution() % div != 0 {
            return Err(Error::Config(format!(
                "generator resolution {} not divisible by discriminator factor {div}",
                self.resolution()
            )));
        }
        if self.discriminator.input_channels != 2 * self.generator.timesteps {
            return Err(Error::Config(format!(
                "discriminator input_channels {} != 2 * timesteps {}",
                self.discriminator.input_channels,
                self.generator.timesteps
            )));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.losses.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}
