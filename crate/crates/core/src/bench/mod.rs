//! Synthetic benchmark: dataset, victim training, edits, PSNR reports,
//! transfer and budget sweeps.

mod dataset;
mod edit;
mod pipeline;
mod run;

pub use dataset::{class_mean, generate_dataset, sample_scene, BenchItem, Scene, NUM_CLASSES, SCENE_SIZE, VOCAB};
pub use edit::{edit, edit_batch, postprocess_paste, psnr, EditJob};
pub use pipeline::{finetune_inpaint, train_standard, training_batch, TrainConfig};
pub use run::{
    eta_sweep, evaluate, fmt6, median, median_psnr, one_step_keep_errors, par_map, protect_all,
    records_csv, run_benchmark, select, steps_sweep, summary_json, transfer_eval, BenchConfig,
    BenchRecord, BenchRun, DeltaArchive, DeltaEntry, Failure, Method, SweepResult, CSV_HEADER,
};
