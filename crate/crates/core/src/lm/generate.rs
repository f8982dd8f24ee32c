use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax, FusionLm};
use super::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    /// Number of new tokens to produce at most.
    pub max_len: usize,
    /// `0` selects greedy argmax decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub constrain_audio: bool,
    /// Generation ends after this token is emitted.
    pub stop_token: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            temperature: 1.0,
            top_k: None,
            constrain_audio: true,
            stop_token: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// An audio span was still open when generation stopped.
    pub unclosed_audio: bool,
}

impl Generation {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BracketError {
    #[error("audio token at position {0} outside an audio span")]
    AudioOutsideSpan(usize),
    #[error("text token at position {0} inside an audio span")]
    TextInsideSpan(usize),
    #[error("nested start-of-audio marker at position {0}")]
    NestedSoa(usize),
    #[error("end-of-audio marker without an open span at position {0}")]
    StrayEoa(usize),
}

/// Validates `soa … audio … eoa` bracketing. Returns whether a span is still
/// open at the end of the sequence.
pub fn check_bracketing(
    vocab: &Vocab,
    tokens: &[usize],
) -> std::result::Result<bool, BracketError> {
    let mut open = false;
    for (i, &id) in tokens.iter().enumerate() {
        if vocab.has_audio() && id == vocab.soa() {
            if open {
                return Err(BracketError::NestedSoa(i));
            }
            open = true;
        } else if vocab.has_audio() && id == vocab.eoa() {
            if !open {
                return Err(BracketError::StrayEoa(i));
            }
            open = false;
        } else if vocab.is_audio(id) {
            if !open {
                return Err(BracketError::AudioOutsideSpan(i));
            }
        } else if open {
            return Err(BracketError::TextInsideSpan(i));
        }
    }
    Ok(open)
}

fn allowed(vocab: &Vocab, id: usize, open: bool) -> bool {
    if !vocab.has_audio() {
        return true;
    }
    if open {
        vocab.is_audio(id) || id == vocab.eoa()
    } else {
        !vocab.is_audio(id) && id != vocab.eoa()
    }
}

/// Draw one id from `logits` (already masked with `-inf`).
fn sample(logits: &[f64], cfg: &GenerateConfig, rng: &mut impl Rng) -> usize {
    if cfg.temperature <= 0.0 {
        let as_f32: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
        return argmax(&as_f32);
    }
    let mut order: Vec<usize> = (0..logits.len())
        .filter(|&i| logits[i].is_finite())
        .collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if let Some(k) = cfg.top_k {
        order.truncate(k.max(1));
    }
    let top = logits[order[0]];
    let probs: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - top) / cfg.temperature).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &p) in order.iter().zip(&probs) {
        if u < p {
            return i;
        }
        u -= p;
    }
    *order.last().expect("at least one allowed token")
}

/// Autoregressive sampling from `prompt`. With `constrain_audio`, logits are
/// masked so every audio span stays well bracketed.
pub fn generate(
    model: &FusionLm,
    prompt: &[usize],
    cfg: &GenerateConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    let vocab = model.vocab;
    if prompt.is_empty() {
        return Err(Error::invalid("generation needs a non-empty prompt"));
    }
    vocab.validate(prompt)?;
    let mut open =
        check_bracketing(&vocab, prompt).map_err(|e| Error::invalid(format!("prompt: {e}")))?;
    if !(cfg.temperature >= 0.0) {
        return Err(Error::invalid("temperature must be non-negative"));
    }
    let mut tokens = prompt.to_vec();
    let v = vocab.size();
    for _ in 0..cfg.max_len {
        if tokens.len() >= model.config.context {
            break;
        }
        let logits = model.logits(&tokens)?;
        let last = &logits.data()[(tokens.len() - 1) * v..];
        let masked: Vec<f64> = last
            .iter()
            .enumerate()
            .map(|(id, &l)| {
                if !cfg.constrain_audio || allowed(&vocab, id, open) {
                    l as f64
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let id = sample(&masked, cfg, rng);
        if vocab.has_audio() && id == vocab.soa() {
            open = true;
        } else if vocab.has_audio() && id == vocab.eoa() {
            open = false;
        }
        tokens.push(id);
        if cfg.stop_token == Some(id) {
            break;
        }
    }
    let unclosed_audio = match check_bracketing(&vocab, &tokens) {
        Ok(open) => open,
        Err(_) => open,
    };
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        unclosed_audio,
    })
}
