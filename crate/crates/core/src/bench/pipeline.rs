//! Training of the victim models on generated scenes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{sample_scene, SCENE_SIZE, VOCAB};
use crate::diffusion::{random_training_mask, Arch, DenoiserModel, ScheduleKind, TrainBatch, Trainer, Variant};
use crate::error::{Error, Result};
use crate::mask::{mask_family, BinaryMask};
use crate::seed;
use crate::tensor::{AdamConfig, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_width: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub standard_steps: usize,
    pub inpaint_steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Probability of replacing a condition id by the unconditional id 0.
    pub label_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            timesteps: 1000,
            schedule: ScheduleKind::Cosine,
            standard_steps: 3000,
            inpaint_steps: 3000,
            batch: 8,
            lr: 1e-3,
            label_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::usage("train config needs batch >= 1, lr > 0, dropout in [0, 1]"));
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> Arch {
        Arch {
            height: SCENE_SIZE,
            width: SCENE_SIZE,
            channels: 1,
            base_width: self.base_width,
            vocab: VOCAB,
            variant: Variant::Standard,
            schedule: self.schedule,
            timesteps: self.timesteps,
            time_features: 32,
            embed_channels: 4,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Keep-mask for fine-tuning: half random shapes, a quarter the blob
/// itself, a quarter one of the blob's hand-crafted variants.
fn finetune_mask(m_gt: &BinaryMask, rng: &mut ChaCha8Rng) -> Result<BinaryMask> {
    let u: f64 = rng.gen();
    if u < 0.5 {
        random_training_mask(m_gt.height(), m_gt.width(), rng.gen())
    } else if u < 0.75 {
        Ok(m_gt.clone())
    } else {
        let mut family = mask_family(m_gt, rng.gen())?;
        let k = rng.gen_range(1..family.len());
        Ok(family.swap_remove(k).mask)
    }
}

/// A batch of fresh scenes; with `inpaint`, also their keep-masks.
pub fn training_batch(config: &TrainConfig, rng: &mut ChaCha8Rng, inpaint: bool) -> Result<TrainBatch> {
    let mut images = Vec::with_capacity(config.batch);
    let mut conds = Vec::with_capacity(config.batch);
    let mut masks = Vec::new();
    for _ in 0..config.batch {
        let scene = sample_scene(rng);
        let cond = if rng.gen_bool(config.label_dropout) { 0 } else { scene.class };
        if inpaint {
            masks.push(finetune_mask(&scene.m_gt, rng)?);
        }
        images.push(scene.image);
        conds.push(cond);
    }
    let batch = TrainBatch::new(Tensor::stack(&images)?, conds)?;
    if inpaint {
        batch.with_masks(masks)
    } else {
        Ok(batch)
    }
}

fn run(
    mut trainer: Trainer,
    config: &TrainConfig,
    steps: usize,
    seed: u64,
    stream: &str,
    inpaint: bool,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<DenoiserModel> {
    let mut data_rng = seed::stream_rng(seed, stream, 0);
    let mut noise_rng = seed::stream_rng(seed, stream, 1);
    for step in 0..steps {
        let batch = training_batch(config, &mut data_rng, inpaint)?;
        let loss = if inpaint {
            trainer.train_step_inpaint(&batch, &mut noise_rng)?
        } else {
            trainer.train_step_standard(&batch, &mut noise_rng)?
        };
        if !loss.is_finite() {
            return Err(Error::numeric(format!("training loss is {loss} at step {step}")));
        }
        on_step(step, loss);
    }
    Ok(trainer.into_model())
}

/// Trains a standard model from scratch. `on_step` sees every loss.
pub fn train_standard(
    config: &TrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<DenoiserModel> {
    config.validate()?;
    let arch = config.arch();
    let model = DenoiserModel::init(arch.clone(), seed::derive(seed, "init", 0))?;
    let trainer = Trainer::new(model, arch.schedule()?, config.adam())?;
    run(trainer, config, config.standard_steps, seed, "train-standard", false, on_step)
}

/// Expands a standard model to the inpaint variant and fine-tunes it.
pub fn finetune_inpaint(
    base: &DenoiserModel,
    config: &TrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<DenoiserModel> {
    config.validate()?;
    if base.variant() != Variant::Standard {
        return Err(Error::usage("fine-tuning starts from a standard model"));
    }
    let model = base.to_inpaint()?;
    let sched = model.arch.schedule()?;
    let trainer = Trainer::new(model, sched, config.adam())?;
    run(trainer, config, config.inpaint_steps, seed, "train-inpaint", true, on_step)
}
