//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::injection::DecoderConfig;
use crate::model::ModelConfig;
use crate::scenes::{PromptConfig, PromptKind, SceneConfig, ShiftConfig};
use crate::slot_attention::SlotConfig;
use crate::slot_decoder::SlotDecoderConfig;

/// Environment variable that replaces `run_dir` (and nothing else).
pub const RUN_DIR_ENV: &str = "SLOTSAM_RUN_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub source_steps: usize,
    pub source_batch: usize,
    pub source_lr: f64,
    pub stage1_steps: usize,
    pub stage1_batch: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_batch: usize,
    pub stage2_lr: f64,
    /// Leading fraction of stage-2 epochs that only train the object MLP and fusion.
    pub warm_fraction: f64,
    pub ema_momentum: f64,
    pub object_weight: f64,
    pub rec_weight: f64,
    pub focal_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source_steps: 1500,
            source_batch: 4,
            source_lr: 1e-3,
            stage1_steps: 3000,
            stage1_batch: 8,
            stage1_lr: 4e-4,
            stage2_epochs: 10,
            stage2_batch: 4,
            stage2_lr: 1e-4,
            warm_fraction: 0.2,
            ema_momentum: 0.999,
            object_weight: 1.0,
            rec_weight: 0.1,
            focal_gamma: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn warm_epochs(&self) -> usize {
        (self.stage2_epochs as f64 * self.warm_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("train.ema_momentum must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.warm_fraction) {
            return Err(Error::Config("train.warm_fraction must lie in [0, 1]".into()));
        }
        if self.source_batch == 0 || self.stage1_batch == 0 || self.stage2_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("train.focal_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prompt_kinds: Vec<PromptKind>,
    pub ignore_background: bool,
    /// Render visualisation panels every this many stage-2 epochs (0 = never).
    pub viz_every: usize,
    pub viz_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt_kinds: PromptKind::ALL.to_vec(),
            ignore_background: true,
            viz_every: 5,
            viz_samples: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub scene: SceneConfig,
    pub shift: ShiftConfig,
    pub prompt: PromptConfig,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub slots: SlotConfig,
    pub slot_decoder: SlotDecoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            shift: ShiftConfig::default(),
            prompt: PromptConfig::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            slots: SlotConfig::default(),
            slot_decoder: SlotDecoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model().validate()?;
        self.train.validate()?;
        if self.data.target_val == 0 {
            return Err(Error::Config("data.target_val must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image: (self.scene.height, self.scene.width),
            encoder: self.encoder.clone(),
            slots: self.slots.clone(),
            slot_decoder: self.slot_decoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form, excluding `run_dir`. Independent of
    /// key order in the source file.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("run_dir");
        }
        let canonical = serde_json::to_string(&v).expect("json");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Apply the run-directory environment override.
    pub fn with_env_run_dir(mut self) -> Self {
        if let Some(dir) = std::env::var_os(RUN_DIR_ENV) {
            self.run_dir = PathBuf::from(dir);
        }
        self
    }
}
