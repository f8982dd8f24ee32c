use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_finetune_example, build_pretrain_example, build_text_example, weighted_ce_zloss,
    FusionSequence, LossVars, Segment, Stage, Vocab, Z_LOSS_COEF,
};
use crate::data::{Checkpoint, MetricsLog, PairRecord};
use crate::error::{Error, Result};
use crate::nn::{
    normal_tensor, AdamW, AdamWConfig, ParamId, ParamStore, PositionEmbedding, Transformer,
    TransformerConfig,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::config_path;

/// Default instruction used when a fine-tune record has none.
pub const DEFAULT_INSTRUCTION: &str = "Describe the audio.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_text: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub head_dim: usize,
    pub context: usize,
    /// Standard deviation of freshly initialized embedding rows.
    pub embed_init: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl LmConfig {
    /// Byte-level text, 4 blocks, hidden 128, context 512.
    pub fn toy() -> Self {
        Self {
            vocab_text: 256,
            hidden_dim: 128,
            n_blocks: 4,
            head_dim: 32,
            context: 512,
            embed_init: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_text == 0 || self.context == 0 || !(self.embed_init > 0.0) {
            return Err(Error::invalid(
                "vocab_text, context and embed_init must be positive",
            ));
        }
        self.body().validate()
    }

    fn body(&self) -> TransformerConfig {
        TransformerConfig {
            n_blocks: self.n_blocks,
            hidden_dim: self.hidden_dim,
            head_dim: self.head_dim,
            causal: true,
            timestep_embed_dim: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    /// Rank 64, alpha 128.
    pub fn paper_preset() -> Self {
        Self {
            rank: 64,
            alpha: 128.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub z_coef: f64,
    /// Cosine decay floor as a fraction of `lr`; `1.0` keeps it constant.
    pub lr_final_frac: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            z_coef: Z_LOSS_COEF,
            lr_final_frac: 0.05,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LmTrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub step_losses: Vec<f64>,
    pub metrics: MetricsLog,
}

/// Serialized alongside the tensors so a checkpoint can be rebuilt.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct LmState {
    config: LmConfig,
    vocab: Vocab,
    lora: Option<LoraSpec>,
}

/// Decoder-only transformer over the fused vocabulary. Input and output
/// embeddings are split into a text block and an optional block of audio
/// plus marker rows, so the text rows can be frozen independently.
#[derive(Clone, Debug)]
pub struct FusionLm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub ps: ParamStore<f32>,
    pub text_embed: ParamId,
    pub audio_embed: Option<ParamId>,
    pub pos: PositionEmbedding,
    pub body: Transformer,
    pub text_head: ParamId,
    pub audio_head: Option<ParamId>,
    pub lora: Option<LoraSpec>,
}

impl FusionLm {
    /// Text-only model with randomly initialized weights.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (v, h) = (config.vocab_text, config.hidden_dim);
        let text_embed = ps.add_normal("lm.embed.text", &[v, h], config.embed_init, &mut rng)?;
        let pos = PositionEmbedding::normal(
            &mut ps,
            "lm.pos",
            config.context,
            h,
            config.embed_init,
            &mut rng,
        )?;
        let body = Transformer::new(&mut ps, "lm.body", config.body(), &mut rng)?;
        let text_head = ps.add_normal("lm.head.text", &[v, h], config.embed_init, &mut rng)?;
        Ok(Self {
            vocab: Vocab::text_only(v),
            config,
            ps,
            text_embed,
            audio_embed: None,
            pos,
            body,
            text_head,
            audio_head: None,
            lora: None,
        })
    }

    /// Add `K + 2` rows (audio ids, `soa`, `eoa`) to the input and output
    /// embeddings, drawn from `N(0, init_scale²)`, and freeze the text rows.
    pub fn extend_vocab(&mut self, k: usize, init_scale: f64, rng: &mut impl Rng) -> Result<()> {
        if self.vocab.has_audio() {
            return Err(Error::invalid("vocabulary already extended"));
        }
        if k == 0 || !(init_scale > 0.0) {
            return Err(Error::invalid(
                "extend_vocab needs K > 0 and a positive init scale",
            ));
        }
        let h = self.config.hidden_dim;
        let embed = self.ps.add(
            "lm.embed.audio",
            normal_tensor(&[k + 2, h], init_scale, rng),
        )?;
        let head = self
            .ps
            .add("lm.head.audio", normal_tensor(&[k + 2, h], init_scale, rng))?;
        self.ps.set_frozen(self.text_embed, true);
        self.ps.set_frozen(self.text_head, true);
        self.audio_embed = Some(embed);
        self.audio_head = Some(head);
        self.vocab = Vocab::with_audio(self.config.vocab_text, k);
        Ok(())
    }

    /// Adapters on every block projection; all pre-existing weights other
    /// than the audio rows become frozen.
    pub fn attach_lora(&mut self, spec: LoraSpec, rng: &mut impl Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::invalid("adapters already attached"));
        }
        let keep: Vec<ParamId> = self
            .audio_embed
            .into_iter()
            .chain(self.audio_head)
            .collect();
        let ids: Vec<ParamId> = self.ps.ids().filter(|id| !keep.contains(id)).collect();
        for id in ids {
            self.ps.set_frozen(id, true);
        }
        for lin in self.body.linears_mut() {
            lin.attach_lora(&mut self.ps, spec.rank, spec.alpha, rng)?;
        }
        self.lora = Some(spec);
        Ok(())
    }

    /// `[T, V]` next-token logits for one sequence.
    pub fn forward(&self, tape: &mut Tape<f32>, tokens: &[usize]) -> Result<Var> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        self.vocab.validate(tokens)?;
        let h = self.config.hidden_dim;
        let text = tape.param(&self.ps, self.text_embed);
        let table = match self.audio_embed {
            Some(a) => {
                let a = tape.param(&self.ps, a);
                tape.concat_rows(text, a)?
            }
            None => text,
        };
        let x = tape.gather_rows(table, tokens)?;
        let pos = self.pos.forward(tape, &self.ps, t)?;
        let x = tape.add(x, pos)?;
        let x = tape.reshape(x, &[1, t, h])?;
        let x = self.body.forward(tape, &self.ps, x)?;
        let x = tape.reshape(x, &[t, h])?;
        let w = tape.param(&self.ps, self.text_head);
        let logits = tape.matmul_t(x, w)?;
        match self.audio_head {
            Some(a) => {
                let a = tape.param(&self.ps, a);
                let audio = tape.matmul_t(x, a)?;
                tape.concat_last(logits, audio)
            }
            None => Ok(logits),
        }
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Weighted loss over a batch of sequences, normalized by the total
    /// weight of the whole batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<f32>,
        seqs: &[FusionSequence],
        z_coef: f64,
    ) -> Result<LossVars> {
        let mut rows: Option<Var> = None;
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for s in seqs {
            if s.len() < 2 {
                return Err(Error::invalid("sequence needs at least two tokens"));
            }
            let logits = self.forward(tape, &s.tokens)?;
            let keep: Vec<usize> = (0..s.len() - 1).collect();
            let logits = tape.gather_rows(logits, &keep)?;
            rows = Some(match rows {
                Some(r) => tape.concat_rows(r, logits)?,
                None => logits,
            });
            let (t, w) = s.targets();
            targets.extend_from_slice(t);
            weights.extend_from_slice(w);
        }
        let rows = rows.ok_or_else(|| Error::invalid("empty batch"))?;
        weighted_ce_zloss(tape, rows, &targets, &weights, z_coef)
    }

    /// AdamW over `n_items` examples per epoch, with `build(i, rng)` creating
    /// example `i` afresh each epoch. Metric rows per epoch: loss, zloss.
    pub fn fit<G, F>(
        &mut self,
        n_items: usize,
        mut build: F,
        cfg: &LmTrainConfig,
        rng: &mut G,
    ) -> Result<LmTrainReport>
    where
        G: Rng,
        F: FnMut(usize, &mut G) -> Result<FusionSequence>,
    {
        if n_items == 0 || cfg.batch_size == 0 {
            return Err(Error::invalid(
                "training needs examples and a positive batch size",
            ));
        }
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        let mut report = LmTrainReport::default();
        let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
        let mut order: Vec<usize> = (0..n_items).collect();
        let planned = (cfg.epochs * n_items.div_ceil(cfg.batch_size))
            .min(max_steps)
            .max(1);
        for epoch in 0..cfg.epochs {
            if report.steps >= max_steps {
                break;
            }
            order.shuffle(rng);
            let (mut loss_sum, mut z_sum, mut n) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                if report.steps >= max_steps {
                    break;
                }
                let seqs = chunk
                    .iter()
                    .map(|&i| build(i, rng))
                    .collect::<Result<Vec<_>>>()?;
                let mut tape = Tape::new();
                let l = self.batch_loss(&mut tape, &seqs, cfg.z_coef)?;
                let (loss, z) = (tape.item(l.loss) as f64, tape.item(l.zloss) as f64);
                if !loss.is_finite() || !z.is_finite() {
                    return Err(Error::Diverged {
                        step: report.steps,
                        reason: format!("non-finite loss {loss}"),
                    });
                }
                tape.backward(l.total)?;
                opt.config.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, report.steps, planned);
                self.ps.zero_grad();
                self.ps.accumulate_grads(&tape);
                if let Some(c) = cfg.grad_clip {
                    self.ps.clip_grad_norm(c);
                }
                opt.step(&mut self.ps)?;
                report.steps += 1;
                report.step_losses.push(loss);
                loss_sum += loss;
                z_sum += z;
                n += 1;
            }
            if n == 0 {
                break;
            }
            report
                .metrics
                .record(epoch, "train", "loss", loss_sum / n as f64);
            report
                .metrics
                .record(epoch, "train", "zloss", z_sum / n as f64);
            report.epochs += 1;
        }
        Ok(report)
    }

    /// Train on caption/audio pairs. Pretraining redraws the pair order every
    /// epoch; fine-tuning uses the instruction template.
    pub fn train_pairs(
        &mut self,
        pairs: &[PairRecord],
        stage: Stage,
        cfg: &LmTrainConfig,
        rng: &mut impl Rng,
    ) -> Result<LmTrainReport> {
        let vocab = self.vocab;
        let prepared = pairs
            .iter()
            .map(|p| Ok((vocab.encode_text(&p.caption)?, codes_of(p))))
            .collect::<Result<Vec<_>>>()?;
        match stage {
            Stage::Pretrain => self.fit(
                pairs.len(),
                |i, r| build_pretrain_example(&vocab, &prepared[i].0, &prepared[i].1, r),
                cfg,
                rng,
            ),
            Stage::Finetune => {
                let seqs = pairs
                    .iter()
                    .map(|p| finetune_sequence(&vocab, p))
                    .collect::<Result<Vec<_>>>()?;
                self.fit(seqs.len(), |i, _| Ok(seqs[i].clone()), cfg, rng)
            }
        }
    }

    /// Next-token training of the text-only base model on raw strings.
    pub fn train_text(
        &mut self,
        texts: &[String],
        cfg: &LmTrainConfig,
        rng: &mut impl Rng,
    ) -> Result<LmTrainReport> {
        if self.vocab.has_audio() {
            return Err(Error::invalid(
                "base text training runs before the vocabulary is extended",
            ));
        }
        let seqs = texts
            .iter()
            .map(|t| build_text_example(&self.vocab, t))
            .collect::<Result<Vec<_>>>()?;
        self.fit(seqs.len(), |i, _| Ok(seqs[i].clone()), cfg, rng)
    }

    /// Argmax prediction at every position of `seq`.
    pub fn predictions(&self, seq: &[usize]) -> Result<Vec<usize>> {
        let logits = self.logits(seq)?;
        let v = self.vocab.size();
        Ok(logits.data().chunks(v).map(argmax).collect())
    }

    /// Fraction of positive-weight targets predicted exactly by argmax.
    /// With `mask`, only targets flagged `true` count.
    pub fn accuracy(
        &self,
        seqs: &[FusionSequence],
        mask: Option<&[Vec<bool>]>,
    ) -> Result<Accuracy> {
        let mut acc = Accuracy::default();
        for (si, s) in seqs.iter().enumerate() {
            let pred = self.predictions(&s.tokens)?;
            let (targets, weights) = s.targets();
            for (j, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                let counted = w > 0.0 && mask.is_none_or(|m| m[si][j]);
                if counted {
                    acc.total += 1;
                    acc.correct += usize::from(pred[j] == t);
                }
            }
        }
        Ok(acc)
    }

    /// SHA-256 over the names and bytes of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.ps.iter().filter(|(_, p)| p.is_frozen()) {
            h.update(p.name().as_bytes());
            for v in p.value().data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        Checkpoint::from_params(&self.ps).save(path)?;
        let state = LmState {
            config: self.config.clone(),
            vocab: self.vocab,
            lora: self.lora,
        };
        let cfg_path = config_path(path);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&state)?)
            .map_err(|e| Error::io(cfg_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let state: LmState = serde_json::from_str(&text)?;
        if state.vocab.text != state.config.vocab_text {
            return Err(Error::invalid("vocabulary does not match model config"));
        }
        let mut model = Self::new(state.config, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        if state.vocab.has_audio() {
            model.extend_vocab(state.vocab.audio, 1.0, &mut rng)?;
        }
        if let Some(spec) = state.lora {
            model.attach_lora(spec, &mut rng)?;
        }
        Checkpoint::load(path)?.load_into(&mut model.ps, &[])?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn cosine_lr(lr: f64, final_frac: f64, step: usize, planned: usize) -> f64 {
    let progress = (step as f64 / planned as f64).min(1.0);
    lr * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn codes_of(p: &PairRecord) -> Vec<usize> {
    p.audio_tokens.iter().map(|&c| c as usize).collect()
}

/// Fine-tune rendering of a pair record; the caption is the answer when the
/// record carries none.
pub fn finetune_sequence(vocab: &Vocab, p: &PairRecord) -> Result<FusionSequence> {
    let instruction = p.instruction.as_deref().unwrap_or(DEFAULT_INSTRUCTION);
    let answer = p.answer.clone().unwrap_or_else(|| p.caption.clone());
    build_finetune_example(vocab, instruction, &codes_of(p), &[Segment::Text(answer)])
}

/// For each sequence and target position, whether the prefix before it
/// determines the target within `seqs`. Positions where two sequences share
/// a prefix but continue differently cannot be predicted from context alone.
pub fn determined_targets(seqs: &[FusionSequence]) -> Vec<Vec<bool>> {
    let mut next: HashMap<&[usize], HashSet<usize>> = HashMap::new();
    for s in seqs {
        for t in 1..s.len() {
            next.entry(&s.tokens[..t]).or_default().insert(s.tokens[t]);
        }
    }
    seqs.iter()
        .map(|s| {
            (1..s.len())
                .map(|t| next[&s.tokens[..t]].len() == 1)
                .collect()
        })
        .collect()
}
