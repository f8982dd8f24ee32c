use rand::Rng;

use super::layers::Linear;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const MAX_FREQ: f64 = 1e4;

/// Raw sinusoidal features of `t`: `dim/2` sines followed by `dim/2`
/// cosines, frequencies spaced geometrically from 1 to 10⁴.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "timestep embedding dim {dim} must be even"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            MAX_FREQ.powf(i as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| (freq(i) * t).sin()));
    out.extend((0..half).map(|i| (freq(i) * t).cos()));
    Ok(out)
}

/// Sinusoidal features followed by a two-layer GELU MLP, `dim → dim → dim`.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl TimestepEmbedder {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "timestep embedding dim {dim} must be even"
            )));
        }
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, dim, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim, true, rng)?,
            dim,
        })
    }

    /// Embeds one timestep per batch row, giving `[ts.len(), dim]`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        ts: &[f64],
    ) -> Result<Var> {
        let mut raw = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            raw.extend(sinusoidal_embedding(t, self.dim)?);
        }
        let x = tape.constant(Tensor::from_f64([ts.len(), self.dim], &raw)?);
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, ps, h)
    }
}

/// Embedding of a single timestep as a plain vector of length `dim`.
pub fn timestep_embed<R: Real>(
    embedder: &TimestepEmbedder,
    ps: &ParamStore<R>,
    t: f64,
) -> Result<Tensor<R>> {
    let mut tape = Tape::new();
    let out = embedder.forward(&mut tape, ps, &[t])?;
    tape.value(out).clone().reshape([embedder.dim])
}

/// Fixed sinusoidal position table `[seq_len, dim]`: even channels
/// `sin(t / 10000^(2i/dim))`, odd channels the matching cosine.
pub fn positional_encoding<R: Real>(seq_len: usize, dim: usize) -> Tensor<R> {
    let mut out = Vec::with_capacity(seq_len * dim);
    for t in 0..seq_len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = t as f64 / MAX_FREQ.powf(2.0 * i / dim as f64);
            out.push(R::from_f64_lossy(if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    Tensor::new([seq_len, dim], out).expect("length matches shape")
}
