use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LatentDataset;
use crate::error::{Error, Result};

/// Per-channel damped sinusoid `amp·exp(−damping·τ)·sin(2π·freq·τ + phase) + offset`
/// over normalised time `τ = t / T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPattern {
    pub freq: Vec<f64>,
    pub damping: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ClassPattern {
    fn random(dim: usize, max_amplitude: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self {
            freq: Vec::with_capacity(dim),
            damping: Vec::with_capacity(dim),
            amplitude: Vec::with_capacity(dim),
            phase: Vec::with_capacity(dim),
            offset: Vec::with_capacity(dim),
        };
        for _ in 0..dim {
            p.freq.push(rng.random_range(0.5..4.0));
            p.damping.push(rng.random_range(0.0..3.0));
            p.amplitude
                .push(max_amplitude * rng.random_range(0.35..0.7));
            p.phase.push(rng.random_range(0.0..std::f64::consts::TAU));
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            p.offset
                .push(sign * max_amplitude * rng.random_range(0.1..0.3));
        }
        p
    }

    /// Noise-free `[T, D]` pattern, row-major.
    pub fn render(&self, seq_len: usize) -> Vec<f64> {
        let dim = self.freq.len();
        let mut out = Vec::with_capacity(seq_len * dim);
        for t in 0..seq_len {
            let tau = t as f64 / seq_len as f64;
            for c in 0..dim {
                let env = (-self.damping[c] * tau).exp();
                let wave = (std::f64::consts::TAU * self.freq[c] * tau + self.phase[c]).sin();
                out.push(self.amplitude[c] * env * wave + self.offset[c]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLatentSpec {
    pub n_classes: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub max_amplitude: f64,
    /// Class whose samples are `±pattern` with equal probability.
    pub bimodal_class: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticLatentSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            seq_len: 32,
            dim: 16,
            noise_std: 0.05,
            max_amplitude: 1.0,
            bimodal_class: Some(3),
            seed: 0,
        }
    }
}

impl SyntheticLatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > super::EVENTS.len() {
            return Err(Error::invalid(format!(
                "n_classes must be in [2, {}], got {}",
                super::EVENTS.len(),
                self.n_classes
            )));
        }
        if self.seq_len == 0 || self.dim == 0 {
            return Err(Error::invalid("seq_len and dim must be positive"));
        }
        if !(self.noise_std >= 0.0) || !(self.max_amplitude > 0.0) {
            return Err(Error::invalid(
                "noise_std must be >= 0 and max_amplitude > 0",
            ));
        }
        if let Some(b) = self.bimodal_class {
            if b >= self.n_classes {
                return Err(Error::invalid(format!(
                    "bimodal_class {b} >= n_classes {}",
                    self.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Class patterns; a pure function of `(spec, seed)`.
    pub fn patterns(&self) -> Vec<ClassPattern> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_classes)
            .map(|_| ClassPattern::random(self.dim, self.max_amplitude, &mut rng))
            .collect()
    }

    /// Draw one sample of `label`. Returns the `[T, D]` values and the mode
    /// sign (always `+1` outside the bimodal class).
    pub fn sample(
        &self,
        pattern: &[f64],
        label: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f32>, f64)> {
        let sign = if Some(label) == self.bimodal_class && rng.random_bool(0.5) {
            -1.0
        } else {
            1.0
        };
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let values = pattern
            .iter()
            .map(|&p| (sign * p + noise.sample(rng)) as f32)
            .collect();
        Ok((values, sign))
    }
}

/// `n_per_class` samples of every class, classes interleaved. Each sample
/// draws from its own ChaCha stream, so the result depends only on
/// `(spec, seed, stream_offset)`.
pub fn gen_latent_dataset(
    spec: &SyntheticLatentSpec,
    n_per_class: usize,
    stream_offset: u64,
) -> Result<LatentDataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let patterns: Vec<Vec<f64>> = spec
        .patterns()
        .iter()
        .map(|p| p.render(spec.seq_len))
        .collect();
    let count = n_per_class * spec.n_classes;
    let mut values = Vec::with_capacity(count * spec.seq_len * spec.dim);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.n_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream_offset + i as u64 + 1);
        let (v, _) = spec.sample(&patterns[label], label, &mut rng)?;
        values.extend(v);
        labels.push(label as u16);
    }
    LatentDataset::new(spec.seq_len, spec.dim, values, labels)
}
