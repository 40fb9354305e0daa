//! Batch assembly, optimization loop, fine-tuning and gradient checking.

mod batch;
mod config;
pub mod gradcheck;
mod optim;
mod trainer;

pub use batch::{make_batch, make_item, Batch, TrainItem};
pub use config::TrainConfig;
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{clip_scale, global_grad_norm, AdamW, CosineSchedule};
pub use trainer::{
    batch_loss, batch_rows, fine_tune, fine_tune_config, init_model, seeded_stream, smooth, train, train_step,
    LossLog, StepRecord, Trainer, BATCH_STREAM, INIT_STREAM, NOISE_STREAM,
};
