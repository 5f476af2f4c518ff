//! Experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, ToyDecoderConfig};
use crate::error::{Error, Result};
use crate::heads::{FinetuneConfig, HeadTask};
use crate::mae::{MAEDecoderConfig, MAETrainConfig};
use crate::merge::{MergeMethod, MergeTrainConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mae,
    Align,
    Merge,
    /// Head finetuning, on fused features when a generalist is configured.
    Head,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Mae, Stage::Align, Stage::Merge, Stage::Head];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Mae => "mae",
            Stage::Align => "align",
            Stage::Merge => "merge",
            Stage::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeStage {
    pub decoder: MAEDecoderConfig,
    pub train: MAETrainConfig,
    pub images: usize,
}

impl Default for MaeStage {
    fn default() -> Self {
        Self {
            decoder: MAEDecoderConfig::default(),
            // 64 images at batch 16 for 50 epochs: 200 steps
            train: MAETrainConfig {
                epochs: 50,
                warmup_epochs: 2,
                ..Default::default()
            },
            images: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignStage {
    /// One aligned encoder per decoder; each decoder gets its own seed.
    pub decoders: Vec<ToyDecoderConfig>,
    pub train: AlignConfig,
    pub samples: usize,
}

impl Default for AlignStage {
    fn default() -> Self {
        Self {
            decoders: vec![ToyDecoderConfig::default(); 2],
            train: AlignConfig::default(),
            samples: 768,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeStage {
    pub method: MergeMethod,
    pub train: MergeTrainConfig,
    pub probe_images: usize,
}

impl Default for MergeStage {
    fn default() -> Self {
        Self {
            method: MergeMethod::Learned,
            train: MergeTrainConfig::default(),
            probe_images: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadStage {
    pub task: HeadTask,
    pub train: FinetuneConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for HeadStage {
    fn default() -> Self {
        Self {
            task: HeadTask::BBox,
            train: FinetuneConfig::default(),
            train_samples: 256,
            eval_samples: 100,
        }
    }
}

fn default_generalist() -> Option<ViTConfig> {
    Some(ViTConfig {
        image_size: 32,
        patch_size: 4,
        channels: 1,
        dim: 32,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    pub encoder: ViTConfig,
    pub mae: MaeStage,
    pub align: AlignStage,
    pub merge: MergeStage,
    /// Frozen generalist fused in front of the specialist; `None` trains the
    /// head on the specialist alone.
    pub generalist: Option<ViTConfig>,
    pub head: HeadStage,
    /// Checkpoint name → file to load instead of producing it. Names are
    /// `mae`, `align_<i>`, `merged`, `head`.
    pub resume: BTreeMap<String, PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            stages: Stage::ALL.to_vec(),
            encoder: ViTConfig::default(),
            mae: MaeStage::default(),
            align: AlignStage::default(),
            merge: MergeStage::default(),
            generalist: default_generalist(),
            head: HeadStage::default(),
            resume: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mae.train.validate()?;
        self.mae.decoder.validate()?;
        self.align.train.validate()?;
        for d in &self.align.decoders {
            d.validate()?;
        }
        if let Some(g) = &self.generalist {
            g.validate()?;
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.stages {
            return Err(Error::Usage(format!(
                "stages must be listed once each in pipeline order, got {:?}",
                self.stages
            )));
        }
        if self.stages.contains(&Stage::Align) && self.align.decoders.is_empty() {
            return Err(Error::Usage("alignment needs at least one decoder".into()));
        }
        for (name, path) in &self.resume {
            if !path.is_file() {
                return Err(Error::Usage(format!(
                    "resume checkpoint `{name}` not found at {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// The config with `output_dir` blanked, as canonical JSON bytes; hashed
    /// into the manifest so runs into different directories compare equal.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(serde_json::to_vec(&c)?)
    }
}
