//! Default pipelines shared by the command-line driver and its tests.

use msn_core::data::{caption_corpus, PairRecord, SyntheticLatentSpec, TokenPairSpec};
use msn_core::lm::{
    build_pretrain_example_ordered, check_bracketing, codes_of, determined_targets,
    finetune_sequence, generate, Accuracy, FusionLm, FusionSequence, GenerateConfig, LmConfig,
    LmTrainConfig, LmTrainReport, LoraSpec, Stage,
};
use msn_core::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// What `gen-data` writes: a training and a held-out latent set drawn from
/// disjoint RNG streams, plus caption/token pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRecipe {
    pub latents: SyntheticLatentSpec,
    pub n_per_class: usize,
    pub heldout_per_class: usize,
    pub heldout_offset: u64,
    pub pairs: TokenPairSpec,
}

impl Default for DataRecipe {
    fn default() -> Self {
        Self {
            latents: SyntheticLatentSpec::default(),
            n_per_class: 16,
            heldout_per_class: 16,
            heldout_offset: 1_000_000,
            pairs: TokenPairSpec::default(),
        }
    }
}

/// Fresh fusion-LM training: a text-only base model is first fit to packed
/// caption documents, then the vocabulary is extended with audio tokens and
/// LoRA adapters are trained on the pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmRecipe {
    pub model: LmConfig,
    pub model_seed: u64,
    pub captions_per_doc: usize,
    pub base: LmTrainConfig,
    /// Number of audio codes; `None` takes the largest code in the pairs plus one.
    pub audio_vocab: Option<usize>,
    pub audio_init: f64,
    pub lora: LoraSpec,
    pub train: LmTrainConfig,
}

impl Default for LmRecipe {
    fn default() -> Self {
        Self {
            model: LmConfig::toy(),
            model_seed: 1,
            captions_per_doc: 3,
            base: LmTrainConfig {
                lr: 3e-3,
                batch_size: 10,
                epochs: 40,
                lr_final_frac: 0.3,
                ..Default::default()
            },
            audio_vocab: None,
            audio_init: 0.02,
            lora: LoraSpec {
                rank: 8,
                alpha: 16.0,
            },
            train: LmTrainConfig {
                lr: 3e-3,
                batch_size: 10,
                epochs: 200,
                ..Default::default()
            },
        }
    }
}

pub struct LmOutcome {
    pub model: FusionLm,
    pub base: LmTrainReport,
    pub train: LmTrainReport,
}

pub fn audio_vocab_of(pairs: &[PairRecord]) -> Result<usize> {
    pairs
        .iter()
        .flat_map(|p| p.audio_tokens.iter())
        .max()
        .map(|&m| m as usize + 1)
        .ok_or_else(|| Error::InvalidArgument("pairs carry no audio tokens".into()))
}

pub fn train_lm_fresh(
    pairs: &[PairRecord],
    stage: Stage,
    recipe: &LmRecipe,
    rng: &mut impl Rng,
) -> Result<LmOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let k = match recipe.audio_vocab {
        Some(k) => k,
        None => audio_vocab_of(pairs)?,
    };
    let mut model = FusionLm::new(recipe.model.clone(), recipe.model_seed)?;
    let docs = caption_corpus(pairs, recipe.captions_per_doc);
    let base = model.train_text(&docs, &recipe.base, rng)?;
    model.extend_vocab(k, recipe.audio_init, rng)?;
    model.attach_lora(recipe.lora, rng)?;
    let train = model.train_pairs(pairs, stage, &recipe.train, rng)?;
    Ok(LmOutcome { model, base, train })
}

/// Sequences used to score a trained model: the audio-first rendering for
/// pretraining, the instruction template for fine-tuning.
pub fn scoring_sequences(
    model: &FusionLm,
    pairs: &[PairRecord],
    stage: Stage,
) -> Result<Vec<FusionSequence>> {
    let v = model.vocab;
    pairs
        .iter()
        .map(|p| match stage {
            Stage::Pretrain => {
                build_pretrain_example_ordered(&v, &v.encode_text(&p.caption)?, &codes_of(p), false)
            }
            Stage::Finetune => finetune_sequence(&v, p),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Memorization {
    /// Targets whose prefix fixes the next token within the training set.
    pub determined: Accuracy,
    pub all: Accuracy,
}

pub fn memorization(model: &FusionLm, pairs: &[PairRecord], stage: Stage) -> Result<Memorization> {
    let seqs = scoring_sequences(model, pairs, stage)?;
    let mask = determined_targets(&seqs);
    Ok(Memorization {
        determined: model.accuracy(&seqs, Some(&mask))?,
        all: model.accuracy(&seqs, None)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BracketAudit {
    pub samples: usize,
    pub violations: usize,
    pub unclosed: usize,
}

/// Samples `n` sequences, alternating caption prompts (the model should open
/// an audio span) with open-span prompts (it should continue and close one),
/// and checks the bracketing of every result.
pub fn audit_bracketing(
    model: &FusionLm,
    pairs: &[PairRecord],
    n: usize,
    cfg: &GenerateConfig,
    rng: &mut impl Rng,
) -> Result<BracketAudit> {
    let v = model.vocab;
    let mut audit = BracketAudit::default();
    for i in 0..n {
        let p = &pairs[(i / 2) % pairs.len()];
        let prompt = if i % 2 == 0 {
            v.encode_text(&p.caption)?
        } else {
            vec![v.soa(), v.audio_id(p.audio_tokens[0] as usize)?]
        };
        let g = generate(model, &prompt, cfg, rng)?;
        audit.samples += 1;
        match check_bracketing(&v, &g.tokens) {
            Ok(open) => audit.unclosed += usize::from(open),
            Err(_) => audit.violations += 1,
        }
    }
    Ok(audit)
}
