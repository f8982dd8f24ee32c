use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<R: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<R>, Vec<R>)>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter from its stored gradient. Frozen
    /// parameters are skipped; a trainable one without a gradient is an error.
    pub fn step(&mut self, ps: &mut ParamStore<R>) -> Result<()> {
        let trainable: Vec<ParamId> = ps.ids().filter(|&id| !ps.is_frozen(id)).collect();
        if let Some(&missing) = trainable.iter().find(|&&id| ps.grad(id).is_none()) {
            return Err(Error::MissingGradient(ps.get(missing).name().to_string()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::from_f64_lossy(c.beta1), R::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (
            R::from_f64_lossy(1.0 - c.beta1),
            R::from_f64_lossy(1.0 - c.beta2),
        );
        let decay = R::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let lr = R::from_f64_lossy(c.lr);
        let (bc1, bc2) = (R::from_f64_lossy(bc1), R::from_f64_lossy(bc2));
        let eps = R::from_f64_lossy(c.eps);

        if self.moments.len() < ps.len() {
            self.moments.resize(ps.len(), None);
        }
        for id in trainable {
            let grad = ps.take_grad(id).expect("checked above");
            let n = grad.len();
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![R::zero(); n], vec![R::zero(); n]));
            let p = ps.value_mut(id).data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            ps.restore_grad(id, grad);
        }
        Ok(())
    }

    /// Forget the moments of one parameter (after it was re-initialised).
    pub fn reset_moments(&mut self, id: ParamId) {
        if let Some(slot) = self.moments.get_mut(id.index()) {
            *slot = None;
        }
    }

    /// Forget the moments of selected rows of a `[rows, width]` parameter.
    pub fn reset_moment_rows(&mut self, id: ParamId, rows: &[usize], width: usize) {
        if let Some(Some((m, v))) = self.moments.get_mut(id.index()) {
            for &r in rows {
                m[r * width..(r + 1) * width].fill(R::zero());
                v[r * width..(r + 1) * width].fill(R::zero());
            }
        }
    }
}
