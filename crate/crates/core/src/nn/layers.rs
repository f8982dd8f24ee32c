use rand::Rng;

use super::lora::LoraAdapter;
use super::params::{ParamId, ParamStore};
use super::timestep::positional_encoding;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` with `W` stored `[d_out, d_in]`, plus an optional
/// low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = ps.add_normal(format!("{name}.weight"), &[d_out, d_in], std, rng)?;
        let bias = if bias {
            Some(ps.add(format!("{name}.bias"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        })
    }

    /// Base projection only, ignoring any adapter.
    pub fn forward_base<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        x: Var,
    ) -> Result<Var> {
        let last = tape.shape(x).last().copied();
        if last != Some(self.d_in) {
            return Err(Error::shape(
                "linear",
                tape.shape(x),
                &[self.d_out, self.d_in],
            ));
        }
        let w = tape.param(ps, self.weight);
        let mut y = tape.matmul_t(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(ps, b);
            y = tape.add(y, b)?;
        }
        Ok(y)
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let y = self.forward_base(tape, ps, x)?;
        match &self.lora {
            Some(adapter) => {
                let delta = adapter.delta(tape, ps, x)?;
                tape.add(y, delta)
            }
            None => Ok(y),
        }
    }

    /// Freeze the base weight and bias and add a fresh adapter
    /// (`A ~ N(0, 0.02²)`, `B = 0`).
    pub fn attach_lora<R: Real>(
        &mut self,
        ps: &mut ParamStore<R>,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::invalid("adapter already attached"));
        }
        let name = ps
            .get(self.weight)
            .name()
            .trim_end_matches(".weight")
            .to_string();
        ps.set_frozen(self.weight, true);
        if let Some(b) = self.bias {
            ps.set_frozen(b, true);
        }
        self.lora = Some(LoraAdapter::new(
            ps, &name, self.d_in, self.d_out, rank, alpha, rng,
        )?);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(ps: &mut ParamStore<R>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full([dim], R::one()))?,
            beta: ps.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Lookup table `[n, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub n: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        n: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            table: ps.add_normal(format!("{name}.table"), &[n, dim], std, rng)?,
            n,
            dim,
        })
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        ids: &[usize],
    ) -> Result<Var> {
        let t = tape.param(ps, self.table);
        tape.gather_rows(t, ids)
    }
}

/// Learned absolute position table `[max_len, dim]`, initialized with the
/// sinusoidal encoding so positions are distinguishable from the first step.
#[derive(Clone, Debug)]
pub struct PositionEmbedding {
    pub table: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionEmbedding {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        max_len: usize,
        dim: usize,
    ) -> Result<Self> {
        if max_len == 0 || dim == 0 {
            return Err(Error::invalid(
                "position table needs positive length and width",
            ));
        }
        Ok(Self {
            table: ps.add(format!("{name}.table"), positional_encoding(max_len, dim))?,
            max_len,
            dim,
        })
    }

    /// Table drawn from `N(0, std²)`, matching the token embedding scale.
    pub fn normal<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        max_len: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if max_len == 0 || dim == 0 {
            return Err(Error::invalid(
                "position table needs positive length and width",
            ));
        }
        Ok(Self {
            table: ps.add_normal(format!("{name}.table"), &[max_len, dim], std, rng)?,
            max_len,
            dim,
        })
    }

    /// Rows `0..len` as a `[len, dim]` variable, broadcastable over a batch.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        len: usize,
    ) -> Result<Var> {
        if len > self.max_len {
            return Err(Error::invalid(format!(
                "sequence length {len} exceeds position table {}",
                self.max_len
            )));
        }
        let t = tape.param(ps, self.table);
        let rows: Vec<usize> = (0..len).collect();
        tape.gather_rows(t, &rows)
    }
}

/// Position-wise feed-forward: `Linear(h, 4h) → GELU → Linear(4h, h)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl Mlp {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, MLP_RATIO * dim, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), MLP_RATIO * dim, dim, true, rng)?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, ps, h)
    }
}
