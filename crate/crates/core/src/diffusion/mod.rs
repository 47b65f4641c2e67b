//! Noise schedules, the denoiser, training and DDIM sampling.

pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use model::{mask_batch, masked_source, Arch, DenoiserModel, EpsNodes, EpsProgram, Variant};
pub use sample::{
    ddim_from, ddim_sample, ddim_timesteps, ddim_unrolled, initial_noise, one_step_x0_estimate,
    EpsPredictor, ModelPredictor,
};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use train::{random_training_mask, TrainBatch, Trainer};
