use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, Mlp};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    /// Per-head width; `hidden_dim / head_dim` heads.
    pub head_dim: usize,
    pub causal: bool,
    pub timestep_embed_dim: Option<usize>,
}

impl TransformerConfig {
    /// 12 blocks, 64-wide heads, 768 hidden.
    pub fn paper_preset(causal: bool) -> Self {
        Self {
            n_blocks: 12,
            hidden_dim: 768,
            head_dim: 64,
            causal,
            timestep_embed_dim: None,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.hidden_dim / self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.hidden_dim == 0 || self.hidden_dim % self.head_dim != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} is not divisible by head_dim {}",
                self.hidden_dim, self.head_dim
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::invalid("transformer needs at least one block"));
        }
        if let Some(d) = self.timestep_embed_dim {
            if d == 0 || d % 2 != 0 {
                return Err(Error::invalid(format!(
                    "timestep_embed_dim {d} must be even"
                )));
            }
        }
        Ok(())
    }
}

/// Scaled dot-product attention over `[B, T, H]` inputs split into
/// `n_heads` heads. With `causal`, position `t` only sees positions `≤ t`.
pub fn attention<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 3 || tape.shape(k) != shape || tape.shape(v) != shape {
        return Err(Error::shape("attention", &shape, tape.shape(k)));
    }
    let (b, t, h) = (shape[0], shape[1], shape[2]);
    if n_heads == 0 || h % n_heads != 0 {
        return Err(Error::invalid(format!(
            "{h} channels cannot split into {n_heads} heads"
        )));
    }
    let dh = h / n_heads;
    let mut split = |x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, t, n_heads, dh])?;
        tape.swap_axes12(x)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax(scores, causal)?;
    let out = tape.matmul(weights, v)?;
    let out = tape.swap_axes12(out)?;
    tape.reshape(out, &[b, t, h])
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        hidden: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), hidden, hidden, true, rng)?,
            // A key bias shifts every score in a row equally and cancels in
            // the softmax.
            k: Linear::new(ps, &format!("{name}.k"), hidden, hidden, false, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), hidden, hidden, true, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), hidden, hidden, true, rng)?,
            n_heads,
        })
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        x: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, ps, x)?;
        let k = self.k.forward(tape, ps, x)?;
        let v = self.v.forward(tape, ps, x)?;
        let a = attention(tape, q, k, v, self.n_heads, causal)?;
        self.o.forward(tape, ps, a)
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = cfg.hidden_dim;
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), h)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), h, cfg.n_heads(), rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), h)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), h, rng)?,
        })
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        x: Var,
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, ps, x)?;
        let h = self.attn.forward(tape, ps, h, causal)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, ps, x)?;
        let h = self.mlp.forward(tape, ps, h)?;
        tape.add(x, h)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.attn.q,
            &mut self.attn.k,
            &mut self.attn.v,
            &mut self.attn.o,
            &mut self.mlp.fc1,
            &mut self.mlp.fc2,
        ]
    }
}

/// Stack of blocks followed by a final layer norm; operates on `[B, T, H]`.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Transformer {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        config: TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_blocks)
            .map(|i| Block::new(ps, &format!("{name}.blocks.{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(ps, &format!("{name}.ln_f"), config.hidden_dim)?;
        Ok(Self {
            config,
            blocks,
            ln_f,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(tape, ps, x, self.config.causal)?;
        }
        self.ln_f.forward(tape, ps, x)
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.blocks.iter_mut().flat_map(|b| b.linears_mut())
    }
}
