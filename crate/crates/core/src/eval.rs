//! Reconstruction error, Gaussian embedding statistics, Fréchet distance and
//! side-by-side tokenizer comparison reports. Everything here runs in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LatentDataset;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::Tokenizer;

/// Off-diagonal magnitude at which the Jacobi sweep stops.
pub const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-8;

/// Mean over all elements of `(z − ẑ)²`.
pub fn reconstruction_error<R: Real>(z: &Tensor<R>, z_hat: &Tensor<R>) -> Result<f64> {
    if z.shape() != z_hat.shape() {
        return Err(Error::shape(
            "reconstruction_error",
            z.shape(),
            z_hat.shape(),
        ));
    }
    let sum: f64 = z
        .data()
        .iter()
        .zip(z_hat.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / z.numel() as f64)
}

/// Square `d×d` matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::invalid(format!(
                "{} values do not form a {dim}x{dim} matrix",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = v;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.dim != other.dim {
            return Err(Error::shape(
                "matrix product",
                &[self.dim, self.dim],
                &[other.dim, other.dim],
            ));
        }
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                for j in 0..d {
                    out[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        Ok(Matrix { dim: d, data: out })
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Largest `|m_ij − m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn symmetrize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in i + 1..d {
                let m = 0.5 * (self.data[i * d + j] + self.data[j * d + i]);
                self.data[i * d + j] = m;
                self.data[j * d + i] = m;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let d = m.dim;
    let mut a = m.data.clone();
    let mut v = Matrix::identity(d).data;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off < JACOBI_TOL {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i * d + i]).collect();
    (values, Matrix { dim: d, data: v })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdSqrt {
    pub sqrt: Matrix,
    /// Number of negative eigenvalues raised to zero.
    pub clamped: usize,
}

/// `R` with `R·R ≈ M` for a symmetric positive semi-definite `M`.
pub fn matrix_sqrt_psd(m: &Matrix) -> Result<PsdSqrt> {
    let scale = m.data.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if m.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max deviation {:e})",
            m.asymmetry()
        )));
    }
    let (values, vecs) = symmetric_eigen(m);
    let d = m.dim;
    let mut clamped = 0;
    let roots: Vec<f64> = values
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clamped += 1;
                0.0
            } else {
                l.sqrt()
            }
        })
        .collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d)
                .map(|k| vecs.get(i, k) * roots[k] * vecs.get(j, k))
                .sum();
        }
    }
    let mut sqrt = Matrix { dim: d, data: out };
    sqrt.symmetrize();
    Ok(PsdSqrt { sqrt, clamped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub count: usize,
}

/// Sample mean and unbiased covariance of `n` rows of width `dim`.
pub fn gaussian_stats(rows: &[f64], dim: usize) -> Result<GaussianStats> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::invalid(format!(
            "{} values are not rows of width {dim}",
            rows.len()
        )));
    }
    let n = rows.len() / dim;
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 embeddings, got {n}"
        )));
    }
    let mut mean = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(dim);
    for r in rows.chunks(dim) {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in 0..dim {
                cov.data[i * dim + j] += di * (r[j] - mean[j]);
            }
        }
    }
    cov.data.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    cov.symmetrize();
    Ok(GaussianStats {
        mean,
        covariance: cov,
        count: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    pub distance: f64,
    /// Eigenvalues clamped at zero across all square roots taken.
    pub clamped_eigenvalues: usize,
    /// The value before the final clamp at zero.
    pub raw: f64,
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2·(Σ1^½ Σ2 Σ1^½)^½)`, clamped at zero.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<FrechetResult> {
    let d = s1.mean.len();
    if s2.mean.len() != d {
        return Err(Error::shape("frechet_distance", &[d], &[s2.mean.len()]));
    }
    let mean_term: f64 = s1
        .mean
        .iter()
        .zip(&s2.mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let root1 = matrix_sqrt_psd(&s1.covariance)?;
    let mut inner = root1.sqrt.matmul(&s2.covariance)?.matmul(&root1.sqrt)?;
    inner.symmetrize();
    let root_inner = matrix_sqrt_psd(&inner)?;
    let raw =
        mean_term + s1.covariance.trace() + s2.covariance.trace() - 2.0 * root_inner.sqrt.trace();
    Ok(FrechetResult {
        distance: raw.max(0.0),
        clamped_eigenvalues: root1.clamped + root_inner.clamped,
        raw,
    })
}

/// Time-averaged frame of every sample of a `[B, T, D]` batch, as `B` rows
/// of width `D`.
pub fn mean_pooled(batch: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = batch.shape();
    if s.len() != 3 {
        return Err(Error::shape("mean_pooled", s, &[0, 0, 0]));
    }
    let (t, d) = (s[1], s[2]);
    let mut out = Vec::with_capacity(s[0] * d);
    for sample in batch.data().chunks(t * d) {
        for c in 0..d {
            out.push(
                sample
                    .iter()
                    .skip(c)
                    .step_by(d)
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / t as f64,
            );
        }
    }
    Ok(out)
}

pub fn embedding_stats(set: &LatentDataset) -> Result<GaussianStats> {
    let all: Vec<usize> = (0..set.len()).collect();
    gaussian_stats(&mean_pooled(&set.batch(&all)?)?, set.dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn value(&self, split: &str, model: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.model == model && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,model,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.split, r.model, r.metric, r.value
            ));
        }
        out
    }
}

/// Reconstruct every sample of `set` in mini-batches.
pub fn reconstruct_set(
    model: &Tokenizer,
    set: &LatentDataset,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(set.values().len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(32) {
        let z = set.batch(chunk)?;
        out.extend(model.reconstruct(&z, n_steps, &mut rng)?.into_data());
    }
    Tensor::new([set.len(), set.seq_len, set.dim], out)
}

/// For each held-out split and each model: mean reconstruction error and the
/// Fréchet distance between mean-pooled reconstructions and the split's own
/// latents. Every model sees the same sampling noise on a given split.
pub fn compare_tokenizers(
    splits: &[(&str, &LatentDataset)],
    models: &[(&str, &Tokenizer)],
    n_steps: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let mut report = ComparisonReport::default();
    for (si, (split, set)) in splits.iter().enumerate() {
        if set.len() < 2 {
            return Err(Error::invalid(format!(
                "split `{split}` needs at least 2 samples"
            )));
        }
        let all: Vec<usize> = (0..set.len()).collect();
        let z = set.batch(&all)?;
        let reference = embedding_stats(set)?;
        for (name, model) in models {
            let z_hat = reconstruct_set(model, set, n_steps, seed.wrapping_add(si as u64))?;
            let stats = gaussian_stats(&mean_pooled(&z_hat)?, set.dim)?;
            let fd = frechet_distance(&stats, &reference)?;
            let mut push = |metric: &str, value: f64| {
                report.rows.push(ReportRow {
                    split: split.to_string(),
                    model: name.to_string(),
                    metric: metric.to_string(),
                    value,
                })
            };
            push("recon_mse", reconstruction_error(&z, &z_hat)?);
            push("frechet", fd.distance);
            push("frechet_clamped_eigs", fd.clamped_eigenvalues as f64);
        }
    }
    Ok(report)
}
