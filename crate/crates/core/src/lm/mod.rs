//! Early-fusion language model: one token stream holding byte-level text,
//! audio codebook indices and the `soa`/`eoa` markers around audio spans.

mod generate;
mod model;

pub use generate::{check_bracketing, generate, BracketError, GenerateConfig, Generation};
pub use model::{
    codes_of, determined_targets, finetune_sequence, Accuracy, FusionLm, LmConfig, LmTrainConfig,
    LmTrainReport, LoraSpec, DEFAULT_INSTRUCTION,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Loss weight on every token of an audio block, markers included.
pub const AUDIO_WEIGHT: f64 = 10.0;
pub const Z_LOSS_COEF: f64 = 1e-4;

/// Token id layout: text `[0, V_text)`, audio `[V_text, V_text + K)`, then
/// `soa` and `eoa`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub text: usize,
    pub audio: usize,
}

impl Vocab {
    pub fn text_only(text: usize) -> Self {
        Self { text, audio: 0 }
    }

    pub fn with_audio(text: usize, audio: usize) -> Self {
        Self { text, audio }
    }

    pub fn has_audio(&self) -> bool {
        self.audio > 0
    }

    pub fn size(&self) -> usize {
        if self.has_audio() {
            self.text + self.audio + 2
        } else {
            self.text
        }
    }

    pub fn soa(&self) -> usize {
        self.text + self.audio
    }

    pub fn eoa(&self) -> usize {
        self.text + self.audio + 1
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.text
    }

    pub fn is_audio(&self, id: usize) -> bool {
        id >= self.text && id < self.text + self.audio
    }

    pub fn is_marker(&self, id: usize) -> bool {
        self.has_audio() && (id == self.soa() || id == self.eoa())
    }

    /// Token id of codebook entry `k`.
    pub fn audio_id(&self, k: usize) -> Result<usize> {
        if k >= self.audio {
            return Err(Error::IndexOutOfRange {
                what: "audio token",
                index: k,
                size: self.audio,
            });
        }
        Ok(self.text + k)
    }

    pub fn audio_index(&self, id: usize) -> Option<usize> {
        self.is_audio(id).then(|| id - self.text)
    }

    /// UTF-8 bytes as token ids; requires a 256-entry text block.
    pub fn encode_text(&self, s: &str) -> Result<Vec<usize>> {
        if self.text < 256 {
            return Err(Error::invalid(format!(
                "byte-level text needs 256 text tokens, have {}",
                self.text
            )));
        }
        Ok(s.bytes().map(usize::from).collect())
    }

    /// Text tokens back to a string; audio spans are rendered as `<soa>`,
    /// `<a{k}>`, `<eoa>`.
    pub fn render(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if self.is_text(id) && id < 256 {
                bytes.push(id as u8);
            } else if self.has_audio() && id == self.soa() {
                bytes.extend_from_slice(b"<soa>");
            } else if self.has_audio() && id == self.eoa() {
                bytes.extend_from_slice(b"<eoa>");
            } else if let Some(k) = self.audio_index(id) {
                bytes.extend_from_slice(format!("<a{k}>").as_bytes());
            } else {
                bytes.extend_from_slice(format!("<?{id}>").as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn validate(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.size()) {
            Some(&id) => Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: id,
                size: self.size(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::invalid(format!(
                "unknown stage `{other}` (pretrain or finetune)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
}

/// Token ids with one loss weight and modality tag per token. A token's
/// weight applies when it is the prediction target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSequence {
    pub tokens: Vec<usize>,
    pub weights: Vec<f64>,
    pub modality: Vec<Modality>,
    pub stage: Stage,
}

impl FusionSequence {
    fn new(stage: Stage) -> Self {
        Self {
            tokens: Vec::new(),
            weights: Vec::new(),
            modality: Vec::new(),
            stage,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push_text(&mut self, ids: &[usize], weight: f64) {
        self.tokens.extend_from_slice(ids);
        self.weights.extend(std::iter::repeat_n(weight, ids.len()));
        self.modality
            .extend(std::iter::repeat_n(Modality::Text, ids.len()));
    }

    /// `soa`, the audio ids, `eoa`, each carrying `weight`.
    fn push_audio(&mut self, vocab: &Vocab, codes: &[usize], weight: f64) -> Result<()> {
        let mut ids = Vec::with_capacity(codes.len() + 2);
        ids.push(vocab.soa());
        for &k in codes {
            ids.push(vocab.audio_id(k)?);
        }
        ids.push(vocab.eoa());
        self.weights.extend(std::iter::repeat_n(weight, ids.len()));
        self.modality
            .extend(std::iter::repeat_n(Modality::Audio, ids.len()));
        self.tokens.extend(ids);
        Ok(())
    }

    /// Targets `x_{2:T}` and their weights.
    pub fn targets(&self) -> (&[usize], &[f64]) {
        (&self.tokens[1..], &self.weights[1..])
    }
}

fn need_audio(vocab: &Vocab, text: &[usize], codes: &[usize]) -> Result<()> {
    if !vocab.has_audio() {
        return Err(Error::invalid("vocabulary has no audio tokens"));
    }
    if text.is_empty() || codes.is_empty() {
        return Err(Error::invalid("pair needs non-empty text and audio"));
    }
    vocab.validate(text)?;
    if let Some(&bad) = text.iter().find(|&&id| !vocab.is_text(id)) {
        return Err(Error::invalid(format!("token {bad} is not a text token")));
    }
    Ok(())
}

/// `text, soa, audio, eoa` when `text_first`, else `soa, audio, eoa, text`.
pub fn build_pretrain_example_ordered(
    vocab: &Vocab,
    text: &[usize],
    codes: &[usize],
    text_first: bool,
) -> Result<FusionSequence> {
    need_audio(vocab, text, codes)?;
    let mut seq = FusionSequence::new(Stage::Pretrain);
    if text_first {
        seq.push_text(text, 1.0);
        seq.push_audio(vocab, codes, AUDIO_WEIGHT)?;
    } else {
        seq.push_audio(vocab, codes, AUDIO_WEIGHT)?;
        seq.push_text(text, 1.0);
    }
    Ok(seq)
}

/// Pretraining pair in a random order (fair coin).
pub fn build_pretrain_example(
    vocab: &Vocab,
    text: &[usize],
    codes: &[usize],
    rng: &mut impl Rng,
) -> Result<FusionSequence> {
    build_pretrain_example_ordered(vocab, text, codes, rng.random_bool(0.5))
}

/// Plain text with unit weights, for training the text-only base model.
pub fn build_text_example(vocab: &Vocab, text: &str) -> Result<FusionSequence> {
    let ids = vocab.encode_text(text)?;
    if ids.len() < 2 {
        return Err(Error::invalid("text example needs at least two bytes"));
    }
    let mut seq = FusionSequence::new(Stage::Pretrain);
    seq.push_text(&ids, 1.0);
    Ok(seq)
}

/// Piece of a fine-tuning answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    /// Codebook indices, wrapped in `soa`/`eoa` when rendered.
    Audio(Vec<usize>),
}

/// `USER: <soa>audio<eoa> {instruction} ASSISTANT: {answer}`. Everything up
/// to and including `ASSISTANT:` has weight 0; the answer is weighted like
/// pretraining data.
pub fn build_finetune_example(
    vocab: &Vocab,
    instruction: &str,
    codes: &[usize],
    answer: &[Segment],
) -> Result<FusionSequence> {
    let empty = answer.iter().all(|s| match s {
        Segment::Text(t) => t.is_empty(),
        Segment::Audio(a) => a.is_empty(),
    });
    if answer.is_empty() || empty {
        return Err(Error::invalid("fine-tune example needs a non-empty answer"));
    }
    let instr = vocab.encode_text(instruction)?;
    need_audio(vocab, if instr.is_empty() { &[0] } else { &instr }, codes)?;
    let mut seq = FusionSequence::new(Stage::Finetune);
    seq.push_text(&vocab.encode_text("USER: ")?, 0.0);
    seq.push_audio(vocab, codes, 0.0)?;
    seq.push_text(
        &vocab.encode_text(&format!(" {instruction} ASSISTANT:"))?,
        0.0,
    );
    let mut first = true;
    for part in answer {
        match part {
            Segment::Text(t) => {
                let t = if first { format!(" {t}") } else { t.clone() };
                seq.push_text(&vocab.encode_text(&t)?, 1.0);
            }
            Segment::Audio(a) => {
                if first {
                    seq.push_text(&vocab.encode_text(" ")?, 1.0);
                }
                seq.push_audio(vocab, a, AUDIO_WEIGHT)?;
            }
        }
        first = false;
    }
    Ok(seq)
}

/// Tape handles of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub zloss: Var,
    pub total: Var,
}

/// `loss = Σ w·(−log softmax(logits)[target]) / Σ w`,
/// `zloss = c_z · mean((log Z)²)`, `total = loss + zloss`, over `[N, V]` logits.
pub fn weighted_ce_zloss<R: crate::tensor::Real>(
    tape: &mut Tape<R>,
    logits: Var,
    targets: &[usize],
    weights: &[f64],
    z_coef: f64,
) -> Result<LossVars> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.len() != weights.len() {
        return Err(Error::shape(
            "weighted_ce_zloss",
            &shape,
            &[targets.len(), weights.len()],
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::invalid("loss weights sum to zero"));
    }
    let lse = tape.logsumexp(logits)?;
    let picked = tape.pick(logits, targets)?;
    let nll = tape.sub(lse, picked)?;
    let w = tape.constant(Tensor::from_f64([weights.len()], weights)?);
    let weighted = tape.mul(nll, w)?;
    let total_nll = tape.sum(weighted)?;
    let loss = tape.scale(total_nll, 1.0 / wsum)?;
    let sq = tape.square(lse)?;
    let zmean = tape.mean(sq)?;
    let zloss = tape.scale(zmean, z_coef)?;
    let total = tape.add(loss, zloss)?;
    Ok(LossVars { loss, zloss, total })
}
