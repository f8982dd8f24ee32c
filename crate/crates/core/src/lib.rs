//! Ultra-low-bitrate audio latent tokenizer and early-fusion language model
//! training, built on a small reverse-mode autodiff engine.
//!
//! The tokenizer maps a `T×D` latent sequence through a causal transformer
//! encoder and a vector-quantization bottleneck to one discrete token per
//! frame, and reconstructs latents with a flow-matching diffusion
//! transformer (or a deterministic MSE decoder for comparison). The
//! language-model side extends a toy byte-level LM with audio tokens,
//! `soa`/`eoa` markers and LoRA adapters.

pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradsuite;
pub mod lm;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod vq;

pub use error::{Error, Result};
