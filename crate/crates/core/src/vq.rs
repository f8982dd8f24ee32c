//! Vector-quantization bottleneck: nearest-entry lookup, the codebook and
//! commitment losses, straight-through gradients and dead-entry restarts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub dim: usize,
    /// Weight of the commitment term.
    pub beta: f64,
    /// Per-step decay of the usage counters.
    pub usage_decay: f64,
    /// Entries whose decayed usage drops below this are re-seeded; 0 disables.
    pub restart_threshold: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            dim: 16,
            beta: 0.25,
            usage_decay: 0.99,
            restart_threshold: 1e-3,
        }
    }
}

impl VqConfig {
    pub fn paper_preset() -> Self {
        Self {
            codebook_size: 8196,
            dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.dim == 0 {
            return Err(Error::invalid(
                "codebook size and dimension must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.usage_decay) {
            return Err(Error::invalid(format!(
                "usage_decay {} outside [0, 1)",
                self.usage_decay
            )));
        }
        if self.restart_threshold < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid(
                "restart_threshold and beta must be non-negative",
            ));
        }
        Ok(())
    }
}

/// A `K×D` table of code vectors stored as a trainable parameter, plus
/// per-entry usage counters.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub config: VqConfig,
    pub entries: ParamId,
    pub usage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult<R: Real = f32> {
    pub indices: Vec<usize>,
    pub quantized: Tensor<R>,
    pub commitment_loss: f64,
    pub codebook_loss: f64,
}

/// Tape handles produced when quantizing inside a training graph.
#[derive(Clone, Debug)]
pub struct QuantizedVars {
    pub indices: Vec<usize>,
    /// Decoder input: value of the quantized vectors, gradient routed to `e`.
    pub decoder_input: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

impl Codebook {
    pub fn new<R: Real>(
        ps: &mut ParamStore<R>,
        name: &str,
        config: VqConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let table = normal_tensor(&[config.codebook_size, config.dim], 1.0, rng);
        let entries = ps.add(format!("{name}.entries"), table)?;
        let usage = vec![1.0; config.codebook_size];
        Ok(Self {
            config,
            entries,
            usage,
        })
    }

    pub fn size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Nearest entry for every row of `e` (`[N, D]` or `[.., D]`).
    pub fn nearest<R: Real>(&self, ps: &ParamStore<R>, e: &Tensor<R>) -> Result<Vec<usize>> {
        nearest_indices(e, ps.value(self.entries))
    }

    pub fn quantize<R: Real>(
        &self,
        ps: &ParamStore<R>,
        e: &Tensor<R>,
    ) -> Result<QuantizationResult<R>> {
        quantize(e, ps.value(self.entries))
    }

    /// Code vectors for `indices`, shaped `[len, D]`.
    pub fn embed<R: Real>(&self, ps: &ParamStore<R>, indices: &[usize]) -> Result<Tensor<R>> {
        let table = ps.value(self.entries);
        let d = self.dim();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.size() {
                return Err(Error::IndexOutOfRange {
                    what: "codebook",
                    index: i,
                    size: self.size(),
                });
            }
            out.extend_from_slice(table.row(i));
        }
        Tensor::new([indices.len(), d], out)
    }

    /// Quantize `e: [N, D]` on the tape.
    pub fn quantize_on_tape<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ps: &ParamStore<R>,
        e: Var,
    ) -> Result<QuantizedVars> {
        let indices = nearest_indices(tape.value(e), ps.value(self.entries))?;
        let table = tape.param(ps, self.entries);
        let q = tape.gather_rows(table, &indices)?;

        let e_sg = tape.detach(e);
        let diff = tape.sub(e_sg, q)?;
        let sq = tape.square(diff)?;
        let codebook_loss = tape.mean(sq)?;

        let q_sg = tape.detach(q);
        let diff = tape.sub(e, q_sg)?;
        let sq = tape.square(diff)?;
        let commitment_loss = tape.mean(sq)?;

        let decoder_input = tape.straight_through(e, q)?;
        Ok(QuantizedVars {
            indices,
            decoder_input,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Fold one batch of assignments into the decayed usage counters.
    pub fn record_usage(&mut self, indices: &[usize]) {
        let decay = self.config.usage_decay;
        let mut counts = vec![0.0f64; self.size()];
        for &i in indices {
            counts[i] += 1.0;
        }
        for (u, c) in self.usage.iter_mut().zip(counts) {
            *u = decay * *u + (1.0 - decay) * c;
        }
    }

    /// Re-seed every entry whose usage fell below the restart threshold with
    /// a random row of `batch` (`[N, D]` encoder outputs) and reset its
    /// counter. Returns the re-seeded entry indices.
    pub fn restart_dead<R: Real>(
        &mut self,
        ps: &mut ParamStore<R>,
        batch: &Tensor<R>,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let threshold = self.config.restart_threshold;
        if threshold <= 0.0 {
            return Ok(Vec::new());
        }
        let d = self.dim();
        if batch.shape().last() != Some(&d) {
            return Err(Error::shape(
                "restart_dead",
                batch.shape(),
                &[self.size(), d],
            ));
        }
        let rows = batch.numel() / d;
        let dead: Vec<usize> = (0..self.size())
            .filter(|&k| self.usage[k] < threshold)
            .collect();
        let table = ps.value_mut(self.entries).data_mut();
        for &k in &dead {
            let r = rng.random_range(0..rows);
            table[k * d..(k + 1) * d].copy_from_slice(&batch.data()[r * d..(r + 1) * d]);
            self.usage[k] = 1.0;
        }
        Ok(dead)
    }

    /// [`record_usage`](Self::record_usage) followed by
    /// [`restart_dead`](Self::restart_dead).
    pub fn maintain<R: Real>(
        &mut self,
        ps: &mut ParamStore<R>,
        indices: &[usize],
        batch: &Tensor<R>,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        self.record_usage(indices);
        self.restart_dead(ps, batch, rng)
    }
}

/// `argmin_k ‖e_i − c_k‖²` per row, ties to the lowest index. The `‖e_i‖²`
/// term is the same for every `k` and is left out.
pub fn nearest_indices<R: Real>(e: &Tensor<R>, entries: &Tensor<R>) -> Result<Vec<usize>> {
    let es = entries.shape();
    if es.len() != 2 {
        return Err(Error::invalid(format!(
            "codebook must be [K, D], got {es:?}"
        )));
    }
    let (k, d) = (es[0], es[1]);
    if e.shape().last() != Some(&d) || e.ndim() < 2 {
        return Err(Error::shape("quantize", e.shape(), es));
    }
    let n = e.numel() / d;
    let table = entries.data();
    let norms: Vec<R> = table
        .chunks(d)
        .map(|c| c.iter().map(|&v| v * v).sum())
        .collect();
    // scores[i, j] = e_i · c_j
    let mut scores = vec![R::zero(); n * k];
    R::gemm(n, d, k, e.data(), false, table, true, &mut scores, false);
    let two = R::one() + R::one();
    let out = scores
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            let mut best_d = norms[0] - two * row[0];
            for j in 1..k {
                let dist = norms[j] - two * row[j];
                if dist < best_d {
                    best = j;
                    best_d = dist;
                }
            }
            best
        })
        .collect();
    Ok(out)
}

/// Quantize without a tape. Losses are means over all elements, so the two
/// values coincide; they differ only in which side receives gradients.
pub fn quantize<R: Real>(e: &Tensor<R>, entries: &Tensor<R>) -> Result<QuantizationResult<R>> {
    let indices = nearest_indices(e, entries)?;
    let d = entries.shape()[1];
    let mut q = Vec::with_capacity(e.numel());
    for &i in &indices {
        q.extend_from_slice(entries.row(i));
    }
    let quantized = Tensor::new(e.shape().to_vec(), q)?;
    let sq: f64 = e
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    let loss = sq / (indices.len() * d) as f64;
    Ok(QuantizationResult {
        indices,
        quantized,
        commitment_loss: loss,
        codebook_loss: loss,
    })
}

/// `exp(H)` of the empirical index distribution.
pub fn codebook_perplexity(histogram: &[usize]) -> Result<f64> {
    let n: usize = histogram.iter().sum();
    if n == 0 {
        return Err(Error::invalid("perplexity of an empty histogram"));
    }
    let n = n as f64;
    let h: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

pub fn histogram(indices: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &i in indices {
        h[i] += 1;
    }
    h
}
