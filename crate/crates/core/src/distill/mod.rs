//! Distillation objectives: projector alignment of class tokens and
//! attention guidance from teacher class attention.

mod attention;
mod config;
mod interpolate;
mod loss;
mod objective;
mod projector;

pub use attention::{
    aggregate_heads, aggregate_heads_alt, aggregate_heads_alt_var, aggregate_heads_var, aggregate_var,
    kl_divergence, kl_divergence_var, ClassAttention, NORMALIZATION_TOL,
};
pub use config::{
    Activation, AgCase, Aggregation, AttentionLayers, DistillConfig, HeadReduction, Interpolation, PaReduction,
};
pub use interpolate::{interpolate_attention, keys_kernel, resample_grid, Interpolated, KEYS_A};
pub use loss::{ag_loss, ag_loss_layers, ag_loss_value, pa_loss, patch_token_alignment, total_loss};
pub use objective::{sample_loss, SampleLoss, TeacherTargets};
pub use projector::{Projector, ProjectorVars, ProjectorWeights};
