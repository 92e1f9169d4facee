//! Whole-pipeline run configuration stored as TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::inference::AssignmentMode;
use crate::metrics::EvalConfig;
use crate::training::{Criterion, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_frames: usize,
    pub output_frames: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_frames: 11,
            output_frames: 5,
            hidden: vec![128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub momentum: f64,
    pub criterion: Criterion,
    /// Frames between consecutive training meta-frames.
    pub shift: usize,
    pub max_train_metaframes: Option<usize>,
    pub max_valid_metaframes: Option<usize>,
    pub epoch_metaframes: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            patience: t.patience,
            momentum: t.momentum,
            criterion: t.criterion,
            shift: t.shift,
            max_train_metaframes: t.max_train_metaframes,
            max_valid_metaframes: t.max_valid_metaframes,
            epoch_metaframes: t.epoch_metaframes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub mode: AssignmentMode,
    pub shift: usize,
    pub write_trace: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            mode: AssignmentMode::Default,
            shift: 1,
            write_trace: true,
        }
    }
}

/// Every tunable of the pipeline; flags on the command line override individual fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dsp: StftConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub inference: InferenceSection,
    pub metrics: EvalConfig,
}

impl RunConfig {
    /// 16 kHz, 512/256-sample frames (257 bins), three 1024-unit layers, 51-frame windows.
    pub fn full_scale() -> Self {
        Self {
            dsp: StftConfig::wideband(),
            corpus: CorpusConfig {
                sample_rate: 16000,
                ..CorpusConfig::default()
            },
            model: ModelConfig {
                input_frames: 51,
                output_frames: 51,
                hidden: vec![1024, 1024, 1024],
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" | "default" => Some(Self::default()),
            "full-scale" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.corpus.validate()?;
        self.train_config().validate()?;
        if self.inference.shift == 0 || self.metrics.shift == 0 {
            return Err(Error::InvalidConfig(
                "inference shift must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            patience: t.patience,
            momentum: t.momentum,
            seed: self.seed,
            criterion: t.criterion,
            input_frames: self.model.input_frames,
            output_frames: self.model.output_frames,
            shift: t.shift,
            hidden: self.model.hidden.clone(),
            max_train_metaframes: t.max_train_metaframes,
            max_valid_metaframes: t.max_valid_metaframes,
            epoch_metaframes: t.epoch_metaframes,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable in TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
