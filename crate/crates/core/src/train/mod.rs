//! Optimizer, schedule, batch assembly, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod log;
mod schedule;
mod step;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{LossConfig, Precision, TrainConfig};
pub use log::{csv_row, CSV_HEADER};
pub use schedule::lr_schedule;
pub use step::{assemble_batch, batch_loss, standardise_patches, Branch, PairBatch};
pub use trainer::{StepLog, Trainer};
