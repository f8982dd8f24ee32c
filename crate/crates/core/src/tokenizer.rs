//! The latent tokenizer: causal transformer encoder, vector-quantization
//! bottleneck and a DiT decoder trained with flow matching or plain MSE.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, LatentDataset, MetricsLog};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, euler_sample, sample_path, Dit, DitConfig, Objective, OtCfmConfig};
use crate::nn::{
    AdamW, AdamWConfig, Linear, ParamStore, PositionEmbedding, Transformer, TransformerConfig,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::vq::{codebook_perplexity, histogram, Codebook, VqConfig};

const USAGE_TENSOR: &str = "codebook.usage";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub seq_len: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub time_dim: usize,
    pub objective: Objective,
    pub sigma_min: f64,
    pub n_sample_steps: usize,
    pub beta: f64,
    pub codebook_weight: f64,
    pub usage_decay: f64,
    pub restart_threshold: f64,
    pub lr: f64,
    /// Cosine-decay the learning rate to `lr · lr_final_frac` over the run;
    /// `1.0` keeps it constant.
    pub lr_final_frac: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, independent of the epoch budget.
    pub max_steps: Option<usize>,
}

impl TokenizerConfig {
    /// Desk-scale default.
    pub fn desk() -> Self {
        Self {
            seq_len: 32,
            latent_dim: 16,
            codebook_size: 256,
            hidden_dim: 128,
            head_dim: 32,
            encoder_blocks: 2,
            decoder_blocks: 2,
            time_dim: 64,
            objective: Objective::FlowMatching,
            sigma_min: crate::flow::DEFAULT_SIGMA_MIN,
            n_sample_steps: crate::flow::DEFAULT_SAMPLE_STEPS,
            beta: 0.25,
            codebook_weight: 1.0,
            usage_decay: 0.99,
            restart_threshold: 1e-3,
            lr: 1e-3,
            lr_final_frac: 0.1,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 50,
            max_steps: None,
        }
    }

    /// Tiny overfitting configuration: `T=16, D=8, K=32`.
    pub fn toy() -> Self {
        Self {
            seq_len: 16,
            latent_dim: 8,
            codebook_size: 32,
            hidden_dim: 64,
            head_dim: 16,
            time_dim: 32,
            lr: 2e-3,
            lr_final_frac: 0.05,
            batch_size: 8,
            ..Self::desk()
        }
    }

    /// 12-block encoder and decoder over `215×64` latents, `K = 8196`.
    pub fn paper() -> Self {
        Self {
            seq_len: 215,
            latent_dim: 64,
            codebook_size: 8196,
            hidden_dim: 768,
            head_dim: 64,
            encoder_blocks: 12,
            decoder_blocks: 12,
            time_dim: 256,
            lr: 1e-4,
            lr_final_frac: 1.0,
            epochs: 75,
            batch_size: 8,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (toy, desk, paper)"
            ))),
        }
    }

    pub fn flow(&self) -> OtCfmConfig {
        OtCfmConfig {
            sigma_min: self.sigma_min,
            n_sample_steps: self.n_sample_steps,
            objective: self.objective,
        }
    }

    pub fn vq(&self) -> VqConfig {
        VqConfig {
            codebook_size: self.codebook_size,
            dim: self.latent_dim,
            beta: self.beta,
            usage_decay: self.usage_decay,
            restart_threshold: self.restart_threshold,
        }
    }

    fn encoder_config(&self) -> TransformerConfig {
        TransformerConfig {
            n_blocks: self.encoder_blocks,
            hidden_dim: self.hidden_dim,
            head_dim: self.head_dim,
            causal: true,
            timestep_embed_dim: None,
        }
    }

    fn decoder_config(&self) -> DitConfig {
        DitConfig {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            n_blocks: self.decoder_blocks,
            head_dim: self.head_dim,
            time_dim: self.time_dim,
            max_len: self.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::invalid("seq_len and batch_size must be positive"));
        }
        self.flow().validate()?;
        self.vq().validate()?;
        self.encoder_config().validate()?;
        Ok(())
    }

    /// Bits per second for clips of `clip_seconds` holding one token per frame.
    pub fn bitrate(&self, clip_seconds: f64) -> Result<f64> {
        bitrate(self.seq_len, clip_seconds, self.codebook_size)
    }
}

/// `tokens_per_clip · log2(K) / clip_seconds`.
pub fn bitrate(tokens_per_clip: usize, clip_seconds: f64, codebook_size: usize) -> Result<f64> {
    if tokens_per_clip == 0 || codebook_size == 0 || !(clip_seconds > 0.0) {
        return Err(Error::invalid("bitrate arguments must be positive"));
    }
    Ok(tokens_per_clip as f64 * (codebook_size as f64).log2() / clip_seconds)
}

/// Frame-wise input projection plus position table, causal transformer,
/// output projection.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_proj: Linear,
    pub pos: PositionEmbedding,
    pub body: Transformer,
    pub out_proj: Linear,
}

impl Encoder {
    pub fn forward(&self, tape: &mut Tape<f32>, ps: &ParamStore<f32>, z: Var) -> Result<Var> {
        let h = self.in_proj.forward(tape, ps, z)?;
        let t = tape.shape(h)[tape.shape(h).len() - 2];
        let pos = self.pos.forward(tape, ps, t)?;
        let h = tape.add(h, pos)?;
        let h = self.body.forward(tape, ps, h)?;
        self.out_proj.forward(tape, ps, h)
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub ps: ParamStore<f32>,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: Dit,
}

/// Loss components of one batch, as tape handles.
struct BatchLoss {
    total: Var,
    decoder: Var,
    codebook: Var,
    commitment: Var,
    indices: Vec<usize>,
    encoded: Var,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    /// Total loss at every optimizer step.
    pub step_losses: Vec<f64>,
    pub step_decoder_losses: Vec<f64>,
    pub restarts: usize,
    pub metrics: MetricsLog,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (d, h) = (config.latent_dim, config.hidden_dim);
        let encoder = Encoder {
            in_proj: Linear::new(&mut ps, "encoder.in_proj", d, h, true, &mut rng)?,
            pos: PositionEmbedding::new(&mut ps, "encoder.pos", config.seq_len, h)?,
            body: Transformer::new(&mut ps, "encoder.body", config.encoder_config(), &mut rng)?,
            out_proj: Linear::new(&mut ps, "encoder.out_proj", h, d, true, &mut rng)?,
        };
        let codebook = Codebook::new(&mut ps, "codebook", config.vq(), &mut rng)?;
        let decoder = Dit::new(&mut ps, "decoder", config.decoder_config(), &mut rng)?;
        Ok(Self {
            config,
            ps,
            encoder,
            codebook,
            decoder,
        })
    }

    fn as_batch(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.config.latent_dim;
        match z.shape() {
            [t, dd] if *dd == d => z.clone().reshape([1, *t, d]),
            [_, _, dd] if *dd == d => Ok(z.clone()),
            other => Err(Error::shape(
                "tokenizer input",
                other,
                &[self.config.seq_len, d],
            )),
        }
    }

    /// Continuous encoder output for `[T, D]` or `[B, T, D]` latents.
    pub fn encode_continuous(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let z = self.as_batch(z)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let e = self.encoder.forward(&mut tape, &self.ps, zv)?;
        Ok(tape.value(e).clone())
    }

    /// One token per frame of a `[T, D]` latent.
    pub fn encode(&self, z: &Tensor<f32>) -> Result<Vec<usize>> {
        if z.ndim() != 2 {
            return Err(Error::shape(
                "encode",
                z.shape(),
                &[self.config.seq_len, self.config.latent_dim],
            ));
        }
        let e = self.encode_continuous(z)?;
        self.codebook.nearest(&self.ps, &e)
    }

    /// Token sequences for every sample of `[B, T, D]`.
    pub fn encode_batch(&self, z: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
        let z = self.as_batch(z)?;
        let t = z.shape()[1];
        let e = self.encode_continuous(&z)?;
        let idx = self.codebook.nearest(&self.ps, &e)?;
        Ok(idx.chunks(t).map(<[usize]>::to_vec).collect())
    }

    /// Reconstruct `[B, T, D]` latents from token sequences of equal length.
    pub fn decode_batch(
        &self,
        tokens: &[Vec<usize>],
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<f32>> {
        let b = tokens.len();
        let t = tokens.first().map(Vec::len).unwrap_or(0);
        if b == 0 || t == 0 || tokens.iter().any(|s| s.len() != t) {
            return Err(Error::invalid(
                "decode needs non-empty token sequences of equal length",
            ));
        }
        let d = self.config.latent_dim;
        let flat: Vec<usize> = tokens.concat();
        let cond = self.codebook.embed(&self.ps, &flat)?.reshape([b, t, d])?;
        match self.config.objective {
            Objective::Mse => {
                self.decoder
                    .predict(&self.ps, &Tensor::zeros([b, t, d]), &vec![0.0; b], &cond)
            }
            Objective::FlowMatching => {
                let cfg = OtCfmConfig {
                    n_sample_steps: n_steps,
                    ..self.config.flow()
                };
                let field = |x: &Tensor<f32>, time: f64| {
                    self.decoder.predict(&self.ps, x, &vec![time; b], &cond)
                };
                euler_sample(&field, &[b, t, d], &cfg, rng)
            }
        }
    }

    /// `[T, D]` reconstruction of one token sequence.
    pub fn decode(
        &self,
        tokens: &[usize],
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<f32>> {
        let out = self.decode_batch(&[tokens.to_vec()], n_steps, rng)?;
        out.reshape([tokens.len(), self.config.latent_dim])
    }

    /// `decode(encode(z))` for a `[B, T, D]` batch.
    pub fn reconstruct(
        &self,
        z: &Tensor<f32>,
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<f32>> {
        let tokens = self.encode_batch(z)?;
        let out = self.decode_batch(&tokens, n_steps, rng)?;
        out.reshape(z.shape().to_vec())
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<f32>,
        z: &Tensor<f32>,
        rng: &mut impl Rng,
    ) -> Result<BatchLoss> {
        let (b, t, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let zv = tape.constant(z.clone());
        let e = self.encoder.forward(tape, &self.ps, zv)?;
        let flat = tape.reshape(e, &[b * t, d])?;
        let q = self.codebook.quantize_on_tape(tape, &self.ps, flat)?;
        let cond = tape.reshape(q.decoder_input, &[b, t, d])?;

        let decoder = match self.config.objective {
            Objective::Mse => {
                let x = tape.constant(Tensor::zeros([b, t, d]));
                let pred = self
                    .decoder
                    .forward(tape, &self.ps, x, &vec![0.0; b], cond)?;
                cfm_loss(tape, pred, zv)?
            }
            Objective::FlowMatching => {
                let cfg = self.config.flow();
                let mut xt = Vec::with_capacity(z.numel());
                let mut ut = Vec::with_capacity(z.numel());
                let mut ts = Vec::with_capacity(b);
                for i in 0..b {
                    let x1 = Tensor::new([t, d], z.data()[i * t * d..(i + 1) * t * d].to_vec())?;
                    let s = sample_path(&x1, rng, &cfg)?;
                    xt.extend_from_slice(s.x_t.data());
                    ut.extend_from_slice(s.u_t.data());
                    ts.push(s.t);
                }
                let x = tape.constant(Tensor::new([b, t, d], xt)?);
                let u = tape.constant(Tensor::new([b, t, d], ut)?);
                let pred = self.decoder.forward(tape, &self.ps, x, &ts, cond)?;
                cfm_loss(tape, pred, u)?
            }
        };
        let cb = tape.scale(q.codebook_loss, self.config.codebook_weight)?;
        let commit = tape.scale(q.commitment_loss, self.config.beta)?;
        let total = tape.add(decoder, cb)?;
        let total = tape.add(total, commit)?;
        Ok(BatchLoss {
            total,
            decoder,
            codebook: q.codebook_loss,
            commitment: q.commitment_loss,
            indices: q.indices,
            encoded: flat,
        })
    }

    /// Decoder loss of a batch without updating anything.
    pub fn evaluate_loss(&self, z: &Tensor<f32>, rng: &mut impl Rng) -> Result<f64> {
        let z = self.as_batch(z)?;
        let mut tape = Tape::new();
        let l = self.batch_loss(&mut tape, &z, rng)?;
        Ok(tape.item(l.decoder) as f64)
    }

    /// AdamW training over shuffled mini-batches. One metric row per epoch
    /// is recorded for each loss component and the codebook perplexity. On a
    /// non-finite loss the parameters are rolled back to the end of the last
    /// completed epoch and an error is returned.
    pub fn train(&mut self, data: &LatentDataset, rng: &mut impl Rng) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if data.seq_len != self.config.seq_len || data.dim != self.config.latent_dim {
            return Err(Error::shape(
                "train_tokenizer",
                &[data.seq_len, data.dim],
                &[self.config.seq_len, self.config.latent_dim],
            ));
        }
        let mut opt = AdamW::new(AdamWConfig {
            lr: self.config.lr,
            weight_decay: self.config.weight_decay,
            ..Default::default()
        });
        let mut report = TrainReport::default();
        let mut last_good = (
            Checkpoint::from_params(&self.ps),
            self.codebook.usage.clone(),
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        let bs = self.config.batch_size.min(data.len());
        let max_steps = self.config.max_steps.unwrap_or(usize::MAX);
        let planned = (self.config.epochs * data.len().div_ceil(bs))
            .min(max_steps)
            .max(1);

        'epochs: for epoch in 0..self.config.epochs {
            if report.steps >= max_steps {
                break;
            }
            order.shuffle(rng);
            let mut sums = [0.0f64; 4];
            let mut n_batches = 0usize;
            let mut hist = vec![0usize; self.codebook.size()];
            for chunk in order.chunks(bs) {
                if report.steps >= max_steps {
                    break;
                }
                let z = data.batch(chunk)?;
                let mut tape = Tape::new();
                let l = self.batch_loss(&mut tape, &z, rng)?;
                let parts =
                    [l.total, l.decoder, l.codebook, l.commitment].map(|v| tape.item(v) as f64);
                if parts.iter().any(|v| !v.is_finite()) {
                    last_good.0.load_into(&mut self.ps, &[USAGE_TENSOR])?;
                    self.codebook.usage = last_good.1;
                    return Err(Error::Diverged {
                        step: report.steps,
                        reason: format!(
                            "non-finite loss {:?}; parameters restored to epoch {epoch}",
                            parts[0]
                        ),
                    });
                }
                tape.backward(l.total)?;
                opt.config.lr = self.lr_at(report.steps, planned);
                self.ps.zero_grad();
                self.ps.accumulate_grads(&tape);
                opt.step(&mut self.ps)?;

                let encoded = tape.value(l.encoded).clone();
                let restarted = self
                    .codebook
                    .maintain(&mut self.ps, &l.indices, &encoded, rng)?;
                opt.reset_moment_rows(self.codebook.entries, &restarted, self.config.latent_dim);
                report.restarts += restarted.len();

                for &i in &l.indices {
                    hist[i] += 1;
                }
                for (s, p) in sums.iter_mut().zip(parts) {
                    *s += p;
                }
                n_batches += 1;
                report.steps += 1;
                report.step_losses.push(parts[0]);
                report.step_decoder_losses.push(parts[1]);
            }
            if n_batches == 0 {
                break 'epochs;
            }
            let m = &mut report.metrics;
            let nb = n_batches as f64;
            m.record(epoch, "train", "loss", sums[0] / nb);
            m.record(epoch, "train", "decoder_loss", sums[1] / nb);
            m.record(epoch, "train", "codebook_loss", sums[2] / nb);
            m.record(epoch, "train", "commitment_loss", sums[3] / nb);
            m.record(epoch, "train", "perplexity", codebook_perplexity(&hist)?);
            report.epochs += 1;
            last_good = (
                Checkpoint::from_params(&self.ps),
                self.codebook.usage.clone(),
            );
        }
        Ok(report)
    }

    fn lr_at(&self, step: usize, planned: usize) -> f64 {
        let frac = self.config.lr_final_frac;
        let progress = (step as f64 / planned as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.config.lr * (frac + (1.0 - frac) * cosine)
    }

    pub fn histogram(&self, tokens: &[Vec<usize>]) -> Vec<usize> {
        histogram(&tokens.concat(), self.codebook.size())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.ps);
        let usage: Vec<f32> = self.codebook.usage.iter().map(|&u| u as f32).collect();
        ck.push(
            USAGE_TENSOR,
            Tensor::new([usage.len()], usage).expect("codebook is non-empty"),
        );
        ck
    }

    /// Writes `<path>` (tensors) and `<path>.json` (config).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.checkpoint().save(path)?;
        let cfg_path = config_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(cfg_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: TokenizerConfig = serde_json::from_str(&text)?;
        let ck = Checkpoint::load(path)?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model.ps, &[USAGE_TENSOR])?;
        if let Some(u) = ck.get(USAGE_TENSOR) {
            if u.numel() != model.codebook.size() {
                return Err(Error::shape(
                    "codebook usage",
                    u.shape(),
                    &[model.codebook.size()],
                ));
            }
            model.codebook.usage = u.data().iter().map(|&v| v as f64).collect();
        }
        Ok(model)
    }
}

pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    p.into()
}
