//! Training orchestration: configuration and presets, manifest
//! materialization, the co-training step, the epoch loop, and checkpoints.

mod checkpoint;
mod config;
mod data;
mod optim;
mod run;
mod step;

pub use checkpoint::{checkpoint_summary, load_checkpoint, save_checkpoint};
pub use config::{TrainConfig, Variant};
pub use data::{
    load_image, load_mask, materialize, resize_image, resize_mask, save_image, save_mask,
    DataPool, LabeledSample,
};
pub use optim::AdamW;
pub use run::{
    provenance_lines, run_training, write_epoch_metrics, write_step_log, EpochMetrics,
    RunArtifacts,
};
pub use step::{train_step, StepBatch, TrainState};
