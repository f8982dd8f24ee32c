use rand::Rng;

use super::layers::Linear;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Trainable low-rank update `ΔW = (alpha / rank)·B·A` on top of a frozen
/// base projection. `A` is `[rank, d_in]`, `B` is `[d_out, rank]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

pub const LORA_INIT_STD: f64 = 0.02;

impl LoraAdapter {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("lora rank must be positive"));
        }
        Ok(Self {
            a: ps.add_normal(format!("{name}.lora_a"), &[rank, d_in], LORA_INIT_STD, rng)?,
            b: ps.add(format!("{name}.lora_b"), Tensor::zeros([d_out, rank]))?,
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / rank)·(x·Aᵀ)·Bᵀ` for `x` of shape `[.., d_in]`.
    pub fn delta<R: Real>(&self, tape: &mut Tape<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let a = tape.param(ps, self.a);
        let b = tape.param(ps, self.b);
        let low = tape.matmul_t(x, a)?;
        let up = tape.matmul_t(low, b)?;
        tape.scale(up, self.scale())
    }
}

/// `W_orig·x + (alpha / rank)·B·(A·x)` for a single input vector.
pub fn lora_forward<R: Real>(
    tape: &mut Tape<R>,
    ps: &ParamStore<R>,
    linear: &Linear,
    x: Var,
) -> Result<Var> {
    if tape.shape(x) != [linear.d_in] {
        return Err(Error::shape("lora_forward", tape.shape(x), &[linear.d_in]));
    }
    let row = tape.reshape(x, &[1, linear.d_in])?;
    let y = linear.forward(tape, ps, row)?;
    tape.reshape(y, &[linear.d_out])
}
