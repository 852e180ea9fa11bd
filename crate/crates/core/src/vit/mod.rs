//! Vision transformer encoder: patch embedding, multi-head self-attention
//! blocks and the class-token / attention outputs consumed by distillation.

mod config;
mod forward;
mod params;

pub use config::{BlockForm, PosEmbed, ViTConfig};
pub use forward::{
    block_forward, encode, msa_forward, patch_embed, patchify, sincos_table, vit_forward, AttentionRecord,
    EncoderOutput, EncoderVars, LayerAttention,
};
pub(crate) use forward::{forward_unchecked, linear};
pub use params::{collect_grads, named, BlockWeights, Linear, Norm, ViTParams, VitVars, VitWeights, WeightTree};
pub use params::init_linear;
