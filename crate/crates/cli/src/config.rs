//! Run configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shield::bench::{BenchConfig, TrainConfig};
use shield::diffusion::ScheduleKind;
use shield::protect::{AttackConfig, AugmentSettings};
use shield::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_width: TrainConfig::default().base_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub timesteps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kind: t.schedule,
            timesteps: t.timesteps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub standard_steps: usize,
    pub inpaint_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub label_dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            standard_steps: t.standard_steps,
            inpaint_steps: t.inpaint_steps,
            batch: t.batch,
            lr: t.lr,
            label_dropout: t.label_dropout,
        }
    }
}

/// File locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Model used by protect, edit and bench (inpaint variant).
    pub checkpoint: Option<PathBuf>,
    /// Standard model that `finetune` starts from.
    pub base_checkpoint: Option<PathBuf>,
    /// Second model for transfer evaluation in `bench`.
    pub transfer_checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Perturbation applied before `edit`.
    pub delta: Option<PathBuf>,
    /// Condition id for `edit`.
    pub cond: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub attack: AttackConfig,
    pub augment: AugmentSettings,
    pub bench: BenchConfig,
    pub io: IoSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::usage(format!("config {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_width: self.model.base_width,
            timesteps: self.schedule.timesteps,
            schedule: self.schedule.kind,
            standard_steps: self.train.standard_steps,
            inpaint_steps: self.train.inpaint_steps,
            batch: self.train.batch,
            lr: self.train.lr,
            label_dropout: self.train.label_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.attack.validate()?;
        if !(self.augment.s > 0.0) || self.augment.n == 0 || self.augment.zeta.is_some_and(|z| !(z >= 0.0)) {
            return Err(Error::usage("augment needs s > 0, n >= 1 and zeta >= 0"));
        }
        self.bench.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
