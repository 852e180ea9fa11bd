//! Optimisation: AdamW with warmup and cosine decay, the distillation loop
//! and supervised teacher pretraining.

mod common;
mod config;
mod distill;
mod optim;
mod supervised;

pub use common::View;
pub use config::{AugmentConfig, TrainConfig};
pub use distill::{
    distill_epoch, resume_distillation, run_distillation, DistillOutcome, DistillSetup, EpochMetrics, StudentState,
    TeacherCache,
};
pub use optim::{adamw_step, decays, lr_at, OptimizerState};
pub use supervised::{accuracy, predict, pretrain_classifier, SupervisedMetrics};
pub(crate) use supervised::argmax;
