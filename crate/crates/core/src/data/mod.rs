//! Synthetic latents and captions, and every on-disk format: latent
//! datasets, checkpoints, caption/token pairs and metric logs.

mod checkpoint;
mod metrics;
mod pairs;
mod synthetic;

pub use checkpoint::Checkpoint;
pub use metrics::{MetricRow, MetricsLog};
pub use pairs::{read_pairs, write_pairs, PairRecord};
pub use synthetic::{gen_latent_dataset, ClassPattern, SyntheticLatentSpec};

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LATENT_MAGIC: &[u8; 4] = b"MSNL";
pub const LATENT_VERSION: u32 = 1;

/// A set of equally shaped `T×D` latents with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub seq_len: usize,
    pub dim: usize,
    values: Vec<f32>,
    labels: Vec<u16>,
}

impl LatentDataset {
    pub fn new(seq_len: usize, dim: usize, values: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if seq_len == 0 || dim == 0 || values.len() != labels.len() * seq_len * dim {
            return Err(Error::invalid(format!(
                "{} values do not form {} latents of {seq_len}x{dim}",
                values.len(),
                labels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault {
                context: "latent dataset values".into(),
            });
        }
        Ok(Self {
            seq_len,
            dim,
            values,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn frame(&self) -> usize {
        self.seq_len * self.dim
    }

    pub fn sample(&self, i: usize) -> Tensor<f32> {
        let n = self.frame();
        Tensor::new(
            [self.seq_len, self.dim],
            self.values[i * n..(i + 1) * n].to_vec(),
        )
        .expect("sized at construction")
    }

    /// Stack the given samples into `[B, T, D]`.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let n = self.frame();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    what: "dataset",
                    index: i,
                    size: self.len(),
                });
            }
            out.extend_from_slice(&self.values[i * n..(i + 1) * n]);
        }
        Tensor::new([idx.len(), self.seq_len, self.dim], out)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let values = self.batch(idx)?.into_data();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.seq_len, self.dim, values, labels)
    }

    pub fn filter_class(&self, label: u16) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == label)
            .collect();
        self.subset(&idx)
    }

    /// Variance over every element of every sample.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        self.values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.values.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(LATENT_MAGIC);
        for v in [
            LATENT_VERSION,
            self.len() as u32,
            self.seq_len as u32,
            self.dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..4] != LATENT_MAGIC {
            return Err(corrupt("missing MSNL header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != LATENT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "latent file",
                found: version,
                expected: LATENT_VERSION,
            });
        }
        let (count, t, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let n_values = count * t * d;
        let expected = 20 + n_values * 4 + count * 2;
        if bytes.len() != expected {
            return Err(corrupt(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let body = &bytes[20..];
        let values = body[..n_values * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = body[n_values * 4..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(t, d, values, labels).map_err(|e| corrupt(&e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Event noun and matching verbs for each class label.
pub const EVENTS: [(&str, [&str; 3]); 8] = [
    ("dog", ["barking", "howling", "growling"]),
    ("bell", ["ringing", "chiming", "tolling"]),
    ("engine", ["humming", "roaring", "idling"]),
    ("bird", ["singing", "chirping", "calling"]),
    ("drum", ["beating", "rolling", "pounding"]),
    ("rain", ["falling", "pattering", "drizzling"]),
    ("violin", ["playing", "squeaking", "humming"]),
    ("siren", ["wailing", "blaring", "sounding"]),
];

const ADJECTIVES: [&str; 6] = ["loud", "quiet", "distant", "nearby", "steady", "faint"];

pub fn event_noun(label: usize) -> Result<&'static str> {
    EVENTS
        .get(label)
        .map(|e| e.0)
        .ok_or(Error::IndexOutOfRange {
            what: "caption class",
            index: label,
            size: EVENTS.len(),
        })
}

/// `"A {adjective} {event} is {verbing}"`, ASCII only.
pub fn gen_caption(label: usize, rng: &mut impl Rng) -> Result<String> {
    let event = event_noun(label)?;
    let verbs = &EVENTS[label].1;
    let adj = ADJECTIVES.choose(rng).expect("non-empty");
    let verb = verbs.choose(rng).expect("non-empty");
    Ok(format!("A {adj} {event} is {verb}"))
}

/// Caption/token pairs whose audio tokens share a per-class prototype, the
/// way tokens of similar sounds share most codes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenPairSpec {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub codebook_size: usize,
    pub n_tokens: usize,
    /// Random positions overwritten with random codes in each pair.
    pub n_substitutions: usize,
    pub seed: u64,
}

impl Default for TokenPairSpec {
    fn default() -> Self {
        Self {
            n_pairs: 50,
            n_classes: 8,
            codebook_size: 64,
            n_tokens: 8,
            n_substitutions: 2,
            seed: 0,
        }
    }
}

pub fn gen_token_pairs(spec: &TokenPairSpec) -> Result<Vec<PairRecord>> {
    if spec.n_classes == 0 || spec.n_classes > EVENTS.len() {
        return Err(Error::invalid(format!(
            "n_classes must be in 1..={}",
            EVENTS.len()
        )));
    }
    if spec.codebook_size == 0 || spec.n_tokens == 0 || spec.codebook_size > u32::MAX as usize {
        return Err(Error::invalid(
            "codebook_size and n_tokens must be positive",
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.codebook_size as u32;
    let protos: Vec<Vec<u32>> = (0..spec.n_classes)
        .map(|_| (0..spec.n_tokens).map(|_| rng.random_range(0..k)).collect())
        .collect();
    (0..spec.n_pairs)
        .map(|i| {
            let label = i % spec.n_classes;
            let mut tokens = protos[label].clone();
            for _ in 0..spec.n_substitutions {
                let j = rng.random_range(0..spec.n_tokens);
                tokens[j] = rng.random_range(0..k);
            }
            Ok(PairRecord {
                caption: gen_caption(label, &mut rng)?,
                audio_tokens: tokens,
                label: Some(event_noun(label)?.to_string()),
                instruction: None,
                answer: None,
            })
        })
        .collect()
}

/// Text documents of `per_doc` captions joined by `". "`, cycling through
/// the pairs with a stride so neighbouring documents differ.
pub fn caption_corpus(pairs: &[PairRecord], per_doc: usize) -> Vec<String> {
    let n = pairs.len();
    if n == 0 || per_doc == 0 {
        return Vec::new();
    }
    let stride = (1..n).find(|s| gcd(*s, n) == 1 && *s > n / 3).unwrap_or(1);
    (0..n)
        .map(|i| {
            (0..per_doc)
                .map(|j| pairs[(i + j * stride) % n].caption.as_str())
                .collect::<Vec<_>>()
                .join(". ")
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
