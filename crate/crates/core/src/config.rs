//! Run configuration: one JSON document covering data generation, model
//! shape, losses and both training stages. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{PlugError, Result};
use crate::model::ModelConfig;
use crate::refine::RefineConfig;
use crate::syndata::GeneratorConfig;
use crate::train::TrainConfig;
use crate::uncertainty::PointLossParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pretrain_objects: usize,
    pub pretrain_val_objects: usize,
    pub train_objects: usize,
    pub val_objects: usize,
    pub test_objects: usize,
    pub pretrain_seed: u64,
    pub train_seed: u64,
    pub val_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_objects: 5000,
            pretrain_val_objects: 500,
            train_objects: 5000,
            val_objects: 500,
            test_objects: 500,
            pretrain_seed: 100,
            train_seed: 1,
            val_seed: 2,
            test_seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub refine: RefineConfig,
    pub point: PointLossParams,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub generator: GeneratorConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            refine: RefineConfig::default(),
            point: PointLossParams::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            generator: GeneratorConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            refine: self.refine.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.point.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.generator.validate()?;
        if self.generator.canvas < self.encoder.image_size / 2 {
            return Err(PlugError::Config("canvas is too small for the crop size".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PlugError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PlugError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_value(v: &serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v.clone()).map_err(|e| PlugError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
