//! Training hyperparameters and input/output locations.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Dataset manifest: 2-mix for stages 1 and 2, 3-mix for transfer
    /// fine-tuning, 2&3-mix for stage 3.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Stage 1 only: start from this stage-1 checkpoint.
    pub transfer_from: Option<PathBuf>,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// Caps on samples drawn from each split; `None` uses all.
    pub max_train_samples: Option<usize>,
    pub max_valid_samples: Option<usize>,
    /// Architecture for a fresh stage-1 run; later stages take it from
    /// their checkpoint.
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn desk(stage: u8) -> Self {
        Self {
            stage,
            lr: if stage == 3 { 3e-4 } else { 1e-3 },
            batch_size: 4,
            max_epochs: 100,
            early_stop_patience: 10,
            clip_norm: 5.0,
            plateau_factor: 0.5,
            plateau_patience: 3,
            manifest: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs"),
            transfer_from: None,
            stage1_checkpoint: None,
            stage2_checkpoint: None,
            seed: 0,
            max_train_samples: None,
            max_valid_samples: None,
            model: ModelConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config(format!("plateau_factor {} outside (0, 1]", self.plateau_factor)));
        }
        if self.transfer_from.is_some() && self.stage != 1 {
            return Err(Error::Config("transfer_from applies to stage 1 only".into()));
        }
        if self.stage >= 2 && self.stage1_checkpoint.is_none() {
            return Err(Error::MissingDependency(format!("stage {} requires a stage-1 checkpoint", self.stage)));
        }
        if self.stage == 3 && self.stage2_checkpoint.is_none() {
            return Err(Error::MissingDependency("stage 3 requires a stage-2 checkpoint".into()));
        }
        for p in [&self.transfer_from, &self.stage1_checkpoint, &self.stage2_checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::MissingDependency(format!("checkpoint {} does not exist", p.display())));
            }
        }
        self.model.validate()
    }
}
