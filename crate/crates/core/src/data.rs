//! Seeded dataset splits: labelled source scenes and shifted target scenes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::derive_seed;
use crate::scenes::{apply_shift, generate_scene, quantize, DomainTag, SceneConfig, SceneSample, ShiftConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_train: 256,
            target_train: 256,
            target_val: 32,
            target_test: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetVal,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::TargetTrain, Split::TargetVal, Split::TargetTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
            Split::TargetTest => "target_test",
        }
    }

    pub fn domain(self) -> DomainTag {
        match self {
            Split::SourceTrain => DomainTag::Source,
            _ => DomainTag::Target,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::TargetTrain => 2,
            Split::TargetVal => 3,
            Split::TargetTest => 4,
        }
    }

    pub fn len(self, cfg: &DataConfig) -> usize {
        match self {
            Split::SourceTrain => cfg.source_train,
            Split::TargetTrain => cfg.target_train,
            Split::TargetVal => cfg.target_val,
            Split::TargetTest => cfg.target_test,
        }
    }
}

/// Seed of sample `index` in `split`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(derive_seed(seed, 0xDA7A_0000 + split.stream()), index as u64)
}

/// One sample: source scenes are generated as-is, target scenes use the
/// target palette and then the configured covariate shift. Images are
/// quantised to 8 bits so the on-disk form is exact.
pub fn make_sample(sample_seed: u64, split: Split, scene: &SceneConfig, shift: &ShiftConfig) -> Result<SceneSample> {
    let cfg = scene.with_domain(split.domain());
    let mut s = generate_scene(sample_seed, &cfg)?;
    if split.domain() == DomainTag::Target {
        s = apply_shift(&s, shift);
    }
    quantize(&mut s.image);
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source_train: Vec<SceneSample>,
    pub target_train: Vec<SceneSample>,
    pub target_val: Vec<SceneSample>,
    pub target_test: Vec<SceneSample>,
}

impl Dataset {
    pub fn generate(seed: u64, data: &DataConfig, scene: &SceneConfig, shift: &ShiftConfig) -> Result<Self> {
        let split = |s: Split| -> Result<Vec<SceneSample>> {
            (0..s.len(data)).map(|i| make_sample(sample_seed(seed, s, i), s, scene, shift)).collect()
        };
        Ok(Self {
            source_train: split(Split::SourceTrain)?,
            target_train: split(Split::TargetTrain)?,
            target_val: split(Split::TargetVal)?,
            target_test: split(Split::TargetTest)?,
        })
    }

    pub fn split(&self, s: Split) -> &[SceneSample] {
        match s {
            Split::SourceTrain => &self.source_train,
            Split::TargetTrain => &self.target_train,
            Split::TargetVal => &self.target_val,
            Split::TargetTest => &self.target_test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<SceneSample> {
        match s {
            Split::SourceTrain => &mut self.source_train,
            Split::TargetTrain => &mut self.target_train,
            Split::TargetVal => &mut self.target_val,
            Split::TargetTest => &mut self.target_test,
        }
    }
}
