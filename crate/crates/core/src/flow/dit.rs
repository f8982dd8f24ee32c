use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Linear, ParamStore, PositionEmbedding, TimestepEmbedder, Transformer, TransformerConfig,
};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    /// Longest sequence the position table covers.
    pub max_len: usize,
}

/// Diffusion-transformer velocity model. The noisy input and the
/// conditioning sequence are concatenated per frame, projected to the hidden
/// width, shifted by position and timestep embeddings, and run through
/// non-causal blocks.
#[derive(Clone, Debug)]
pub struct Dit {
    pub config: DitConfig,
    pub in_proj: Linear,
    pub pos: PositionEmbedding,
    pub time: TimestepEmbedder,
    pub time_proj: Linear,
    pub body: Transformer,
    pub out_proj: Linear,
}

impl Dit {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        config: DitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, h) = (config.latent_dim, config.hidden_dim);
        let body_cfg = TransformerConfig {
            n_blocks: config.n_blocks,
            hidden_dim: h,
            head_dim: config.head_dim,
            causal: false,
            timestep_embed_dim: Some(config.time_dim),
        };
        body_cfg.validate()?;
        Ok(Self {
            in_proj: Linear::new(ps, &format!("{name}.in_proj"), 2 * d, h, true, rng)?,
            pos: PositionEmbedding::new(ps, &format!("{name}.pos"), config.max_len, h)?,
            time: TimestepEmbedder::new(ps, &format!("{name}.time"), config.time_dim, rng)?,
            time_proj: Linear::new(
                ps,
                &format!("{name}.time_proj"),
                config.time_dim,
                h,
                true,
                rng,
            )?,
            body: Transformer::new(ps, &format!("{name}.body"), body_cfg, rng)?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), h, d, true, rng)?,
            config,
        })
    }

    /// `x_t`, `cond`: `[B, T, D]`; one timestep per batch row. Returns the
    /// predicted velocity, `[B, T, D]`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        x_t: Var,
        ts: &[f64],
        cond: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x_t).to_vec();
        if shape.len() != 3 || shape[2] != self.config.latent_dim {
            return Err(Error::shape(
                "dit input",
                &shape,
                &[0, 0, self.config.latent_dim],
            ));
        }
        if tape.shape(cond) != shape.as_slice() {
            return Err(Error::shape("dit conditioning", &shape, tape.shape(cond)));
        }
        let (b, t) = (shape[0], shape[1]);
        if ts.len() != b {
            return Err(Error::shape("dit timesteps", &[b], &[ts.len()]));
        }
        let x = tape.concat_last(x_t, cond)?;
        let x = self.in_proj.forward(tape, ps, x)?;
        let pos = self.pos.forward(tape, ps, t)?;
        let x = tape.add(x, pos)?;

        let temb = self.time.forward(tape, ps, ts)?;
        let temb = self.time_proj.forward(tape, ps, temb)?;
        let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, t)).collect();
        let temb = tape.gather_rows(temb, &rows)?;
        let temb = tape.reshape(temb, &[b, t, self.config.hidden_dim])?;
        let x = tape.add(x, temb)?;

        let x = self.body.forward(tape, ps, x)?;
        self.out_proj.forward(tape, ps, x)
    }

    /// Forward pass without gradient bookkeeping, for inference.
    pub fn predict<R: Real>(
        &self,
        ps: &ParamStore<R>,
        x_t: &Tensor<R>,
        ts: &[f64],
        cond: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let c = tape.constant(cond.clone());
        let out = self.forward(&mut tape, ps, x, ts, c)?;
        Ok(tape.value(out).clone())
    }
}
