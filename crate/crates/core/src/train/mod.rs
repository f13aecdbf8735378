//! Masked pretraining, supervised training, evaluation and checkpoints.

mod checkpoint;
mod mask;
mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointDescriptor, OptimizerMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use mask::{apply_mask, MaskAction, MaskConfig, MaskPlan};
pub use trainer::{evaluate, reconstruction_error, steps_per_epoch, transfer_for_finetune, EvalMetrics, TrainConfig, TrainMetrics, Trainer};
