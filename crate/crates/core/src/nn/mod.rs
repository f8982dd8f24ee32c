//! Transformer building blocks, low-rank adapters and the AdamW optimizer.

mod adamw;
mod layers;
mod lora;
mod params;
mod timestep;
mod transformer;

pub use adamw::{AdamW, AdamWConfig};
pub use layers::{Embedding, LayerNorm, Linear, Mlp, PositionEmbedding, LN_EPS, MLP_RATIO};
pub use lora::{lora_forward, LoraAdapter, LORA_INIT_STD};
pub use params::{normal_tensor, Param, ParamId, ParamStore};
pub use timestep::{positional_encoding, sinusoidal_embedding, timestep_embed, TimestepEmbedder};
pub use transformer::{attention, Block, MultiHeadAttention, Transformer, TransformerConfig};
