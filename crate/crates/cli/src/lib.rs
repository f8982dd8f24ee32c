//! Command-line driver for the latent tokenizer and fusion-LM pipelines.
//!
//! Every run resolves a flat JSON configuration, writes it next to its
//! outputs as `<tag>.config.json`, and finishes with `<tag>.summary.json`
//! (seed, config hash, timestamp, headline metrics) plus `<tag>.metrics.csv`
//! when the command produces metric rows.

pub mod config;
pub mod recipes;

use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use msn_core::data::{
    gen_latent_dataset, gen_token_pairs, read_pairs, write_pairs, LatentDataset, MetricsLog,
};
use msn_core::eval::{
    compare_tokenizers, embedding_stats, frechet_distance, gaussian_stats, mean_pooled,
    reconstruct_set, reconstruction_error,
};
use msn_core::flow::Objective;
use msn_core::gradsuite::run_gradient_suite;
use msn_core::lm::{generate, FusionLm, GenerateConfig, Stage};
use msn_core::tokenizer::{bitrate, Tokenizer, TokenizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::RunConfig;
use recipes::{memorization, train_lm_fresh, DataRecipe, LmRecipe};

/// Environment switch for deterministic mode.
pub const DETERMINISTIC_ENV: &str = "MSN_DETERMINISTIC";

/// Tokens per clip, clip length and codebook size of the full-scale tokenizer.
pub const REFERENCE_TOKENS: usize = 215;
pub const REFERENCE_SECONDS: f64 = 10.0;
pub const REFERENCE_CODEBOOK: usize = 8196;
/// Bitrate commonly quoted for the full-scale tokenizer, in kbps.
pub const QUOTED_KBPS: f64 = 0.23;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<msn_core::Error> for CliError {
    fn from(e: msn_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "msn",
    version,
    about = "Latent audio tokenizer and fusion-LM toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat JSON config file (dotted keys or nested objects).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set tokenizer.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, short, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Fm,
    Mse,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Fm => Objective::FlowMatching,
            ObjectiveArg::Mse => Objective::Mse,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic latents (train.msnl, heldout.msnl) and caption/token pairs (pairs.jsonl).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a tokenizer on a latent file.
    TrainTokenizer {
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        /// Training latents (.msnl).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Encode latents to token sequences (tokens.jsonl).
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode token sequences back to latents (decoded.msnl).
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        /// Euler steps for the flow decoder.
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the fusion LM on caption/token pairs.
    TrainLm {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        pairs: PathBuf,
        /// Continue from an existing LM checkpoint instead of building a fresh one.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample from a trained LM.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Text prompt.
        #[arg(long)]
        prompt_text: Option<String>,
        /// Comma-separated audio codes, wrapped in audio markers before the text prompt.
        #[arg(long, value_delimiter = ',')]
        prompt_audio: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        top_k: Option<usize>,
        /// Number of new tokens at most.
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        constrain_audio: bool,
        #[arg(long)]
        stop_token: Option<usize>,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Mean reconstruction error of a tokenizer on a latent file.
    EvalRecon {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fréchet distance between reconstructions and the original set.
    EvalFad {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction error and Fréchet distance of FM and MSE tokenizers per held-out split.
    Compare {
        #[arg(long)]
        fm: PathBuf,
        #[arg(long)]
        mse: PathBuf,
        /// Held-out split as NAME=PATH; repeatable.
        #[arg(long = "split", value_name = "NAME=PATH", required = true)]
        splits: Vec<String>,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of every differentiable op.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Bitrate report for the reference configuration and, optionally, a checkpoint.
    Report {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = REFERENCE_SECONDS)]
        clip_seconds: f64,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Book-keeping shared by every command.
struct Run {
    tag: String,
    out: PathBuf,
    seed: u64,
    cfg: RunConfig,
    metrics: MetricsLog,
    summary: serde_json::Map<String, Value>,
    outputs: Vec<String>,
}

impl Run {
    fn new(tag: &str, common: &Common) -> CliResult<Self> {
        let mut cfg = RunConfig::new(common.config.as_deref(), &common.sets)?;
        cfg.record("command", &tag);
        cfg.record("seed", &common.seed);
        if let Some(p) = &common.config {
            cfg.record("config_file", &p.display().to_string());
        }
        Ok(Self {
            tag: tag.to_string(),
            out: common.out.clone(),
            seed: common.seed,
            cfg,
            metrics: MetricsLog::new(),
            summary: serde_json::Map::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.cfg.record(key, &path.display().to_string());
    }

    /// Validates the configuration and writes the resolved copy.
    fn start(&mut self) -> CliResult<()> {
        self.cfg.finish()?;
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(format!("{}.config.json", self.tag));
        std::fs::write(path, self.cfg.resolved_json())?;
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn set(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(Value::Null),
        );
    }

    fn metadata(&self) -> Value {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        json!({
            "command": self.tag,
            "seed": self.seed,
            "config_hash": self.cfg.hash(),
            "deterministic": deterministic(),
            "timestamp": timestamp,
        })
    }

    fn finish(mut self) -> CliResult<()> {
        if !self.metrics.rows.is_empty() {
            let name = format!("{}.metrics.csv", self.tag);
            let path = self.path(&name);
            self.metrics.write_csv(path)?;
        }
        let mut doc = self.metadata();
        let obj = doc.as_object_mut().expect("metadata is an object");
        obj.insert("outputs".into(), json!(self.outputs));
        obj.insert(
            "results".into(),
            Value::Object(std::mem::take(&mut self.summary)),
        );
        let path = self.out.join(format!("{}.summary.json", self.tag));
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        eprintln!("{}: wrote {}", self.tag, path.display());
        Ok(())
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::TrainTokenizer {
            objective,
            data,
            common,
        } => train_tokenizer(objective.into(), &data, &common),
        Command::Encode {
            model,
            data,
            common,
        } => encode(&model, &data, &common),
        Command::Decode {
            model,
            tokens,
            steps,
            common,
        } => decode(&model, &tokens, steps, &common),
        Command::TrainLm {
            stage,
            pairs,
            init,
            common,
        } => train_lm(stage.into(), &pairs, init.as_deref(), &common),
        Command::Generate {
            model,
            prompt_text,
            prompt_audio,
            temperature,
            top_k,
            max_len,
            constrain_audio,
            stop_token,
            samples,
            common,
        } => {
            let gcfg = GenerateConfig {
                max_len,
                temperature,
                top_k,
                constrain_audio,
                stop_token,
            };
            run_generate(
                &model,
                prompt_text.as_deref(),
                prompt_audio.as_deref(),
                gcfg,
                samples,
                &common,
            )
        }
        Command::EvalRecon {
            model,
            data,
            steps,
            common,
        } => eval_recon(&model, &data, steps, &common),
        Command::EvalFad {
            model,
            data,
            steps,
            common,
        } => eval_fad(&model, &data, steps, &common),
        Command::Compare {
            fm,
            mse,
            splits,
            steps,
            common,
        } => compare(&fm, &mse, &splits, steps, &common),
        Command::GradCheck { common } => grad_check(&common),
        Command::Report {
            model,
            clip_seconds,
            common,
        } => report(model.as_deref(), clip_seconds, &common),
    }
}

fn gen_data(common: &Common) -> CliResult<()> {
    let mut run = Run::new("gen-data", common)?;
    let mut defaults = DataRecipe::default();
    defaults.latents.seed = common.seed;
    defaults.pairs.seed = common.seed;
    let recipe = run.cfg.section("data", defaults)?;
    run.start()?;

    let train = gen_latent_dataset(&recipe.latents, recipe.n_per_class, 0)?;
    let heldout = gen_latent_dataset(
        &recipe.latents,
        recipe.heldout_per_class,
        recipe.heldout_offset,
    )?;
    let pairs = gen_token_pairs(&recipe.pairs)?;
    train.save(run.path("train.msnl"))?;
    heldout.save(run.path("heldout.msnl"))?;
    write_pairs(run.path("pairs.jsonl"), &pairs)?;
    run.set("train_samples", train.len());
    run.set("heldout_samples", heldout.len());
    run.set("pairs", pairs.len());
    run.set("train_variance", train.variance());
    run.finish()
}

fn train_tokenizer(objective: Objective, data_path: &Path, common: &Common) -> CliResult<()> {
    let tag = format!("train-tokenizer-{}", objective.as_str());
    let mut run = Run::new(&tag, common)?;
    run.input("data", data_path);
    let preset: String = run.cfg.scalar("preset", "desk".to_string())?;
    let data = LatentDataset::load(data_path)?;
    let mut defaults =
        TokenizerConfig::preset(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
    defaults.seq_len = data.seq_len;
    defaults.latent_dim = data.dim;
    let mut config = run.cfg.section("tokenizer", defaults)?;
    config.objective = objective;
    run.cfg.record("tokenizer.objective", &objective);
    run.start()?;

    let mut model = Tokenizer::new(config, common.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed.wrapping_add(1));
    let report = model.train(&data, &mut rng)?;
    let name = format!("tokenizer_{}.msnc", objective.as_str());
    let ckpt = run.path(&name);
    model.save(&ckpt)?;
    run.outputs.push(format!("{name}.json"));
    run.metrics = report.metrics;
    run.set("steps", report.steps);
    run.set("epochs", report.epochs);
    run.set("first_loss", report.step_losses.first());
    run.set("last_loss", report.step_losses.last());
    run.set("codebook_restarts", report.restarts);
    run.set("parameters", model.ps.trainable_numel());
    run.finish()
}

#[derive(Serialize, Deserialize)]
struct TokenLine {
    index: usize,
    label: u16,
    tokens: Vec<usize>,
}

fn encode(model_path: &Path, data_path: &Path, common: &Common) -> CliResult<()> {
    let mut run = Run::new("encode", common)?;
    run.input("model", model_path);
    run.input("data", data_path);
    run.start()?;
    let model = Tokenizer::load(model_path)?;
    let data = LatentDataset::load(data_path)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let tokens = model.encode_batch(&data.batch(&all)?)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(run.path("tokens.jsonl"))?);
    for (i, t) in tokens.iter().enumerate() {
        let line = TokenLine {
            index: i,
            label: data.labels()[i],
            tokens: t.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&line)?)?;
    }
    file.flush()?;
    let hist = model.histogram(&tokens);
    run.set("sequences", tokens.len());
    run.set("distinct_codes", hist.iter().filter(|&&c| c > 0).count());
    run.set("codebook_size", model.config.codebook_size);
    run.finish()
}

fn read_tokens(path: &Path) -> CliResult<Vec<TokenLine>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TokenLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(parsed);
    }
    Ok(out)
}

fn decode(model_path: &Path, tokens_path: &Path, steps: usize, common: &Common) -> CliResult<()> {
    let mut run = Run::new("decode", common)?;
    run.input("model", model_path);
    run.input("tokens", tokens_path);
    run.cfg.record("steps", &steps);
    run.start()?;
    let model = Tokenizer::load(model_path)?;
    let lines = read_tokens(tokens_path)?;
    if lines.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{} holds no token sequences",
            tokens_path.display()
        )));
    }
    let seqs: Vec<Vec<usize>> = lines.iter().map(|l| l.tokens.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let z = model.decode_batch(&seqs, steps, &mut rng)?;
    let (t, d) = (z.shape()[1], z.shape()[2]);
    let labels = lines.iter().map(|l| l.label).collect();
    let set = LatentDataset::new(t, d, z.into_data(), labels)?;
    set.save(run.path("decoded.msnl"))?;
    run.set("sequences", set.len());
    run.finish()
}

fn train_lm(
    stage: Stage,
    pairs_path: &Path,
    init: Option<&Path>,
    common: &Common,
) -> CliResult<()> {
    let tag = format!(
        "train-lm-{}",
        if stage == Stage::Pretrain {
            "pretrain"
        } else {
            "finetune"
        }
    );
    let mut run = Run::new(&tag, common)?;
    run.input("pairs", pairs_path);
    if let Some(p) = init {
        run.input("init", p);
    }
    let recipe = run.cfg.section("lm", LmRecipe::default())?;
    run.start()?;

    let pairs = read_pairs(pairs_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let (model, steps) = match init {
        None => {
            let outcome = train_lm_fresh(&pairs, stage, &recipe, &mut rng)?;
            for row in &outcome.base.metrics.rows {
                run.metrics.record(row.step, "base", &row.metric, row.value);
            }
            run.metrics
                .rows
                .extend(outcome.train.metrics.rows.iter().cloned());
            (outcome.model, outcome.base.steps + outcome.train.steps)
        }
        Some(path) => {
            let mut model = FusionLm::load(path)?;
            let report = model.train_pairs(&pairs, stage, &recipe.train, &mut rng)?;
            run.metrics = report.metrics;
            (model, report.steps)
        }
    };
    let ckpt = run.path("lm.msnc");
    model.save(&ckpt)?;
    run.outputs.push("lm.msnc.json".into());
    let score = memorization(&model, &pairs, stage)?;
    run.set("steps", steps);
    run.set("accuracy_determined", score.determined.value());
    run.set("accuracy_all", score.all.value());
    run.set("vocab_size", model.vocab.size());
    run.set("trainable_parameters", model.ps.trainable_numel());
    run.set("frozen_digest", model.frozen_digest());
    run.finish()
}

fn run_generate(
    model_path: &Path,
    prompt_text: Option<&str>,
    prompt_audio: Option<&[usize]>,
    gcfg: GenerateConfig,
    samples: usize,
    common: &Common,
) -> CliResult<()> {
    if prompt_text.is_none() && prompt_audio.is_none() {
        return Err(CliError::Usage(
            "generate needs --prompt-text and/or --prompt-audio".into(),
        ));
    }
    let mut run = Run::new("generate", common)?;
    run.input("model", model_path);
    run.cfg.record("generate", &gcfg);
    run.cfg.record("prompt_text", &prompt_text);
    run.cfg.record("prompt_audio", &prompt_audio);
    run.cfg.record("samples", &samples);
    run.start()?;

    let model = FusionLm::load(model_path)?;
    let v = model.vocab;
    let mut prompt = Vec::new();
    if let Some(codes) = prompt_audio {
        prompt.push(v.soa());
        for &c in codes {
            prompt.push(v.audio_id(c)?);
        }
        prompt.push(v.eoa());
    }
    if let Some(text) = prompt_text {
        prompt.extend(v.encode_text(text)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let mut file = std::io::BufWriter::new(std::fs::File::create(run.path("generations.jsonl"))?);
    let mut unclosed = 0;
    for i in 0..samples {
        let g = generate(&model, &prompt, &gcfg, &mut rng)?;
        let well_bracketed = msn_core::lm::check_bracketing(&v, &g.tokens).is_ok();
        unclosed += usize::from(g.unclosed_audio);
        let line = json!({
            "sample": i,
            "tokens": g.generated(),
            "text": v.render(g.generated()),
            "unclosed_audio": g.unclosed_audio,
            "well_bracketed": well_bracketed,
        });
        writeln!(file, "{line}")?;
        if i == 0 {
            println!("{}", v.render(&g.tokens));
        }
    }
    file.flush()?;
    run.set("samples", samples);
    run.set("unclosed_audio", unclosed);
    run.finish()
}

fn eval_recon(model_path: &Path, data_path: &Path, steps: usize, common: &Common) -> CliResult<()> {
    let mut run = Run::new("eval-recon", common)?;
    run.input("model", model_path);
    run.input("data", data_path);
    run.cfg.record("steps", &steps);
    run.start()?;
    let model = Tokenizer::load(model_path)?;
    let data = LatentDataset::load(data_path)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let z_hat = reconstruct_set(&model, &data, steps, common.seed)?;
    let mse = reconstruction_error(&data.batch(&all)?, &z_hat)?;
    let variance = data.variance();
    run.metrics.record(0, "eval", "recon_mse", mse);
    run.metrics
        .record(0, "eval", "recon_mse_over_variance", mse / variance);
    run.set("recon_mse", mse);
    run.set("variance", variance);
    run.finish()
}

fn eval_fad(model_path: &Path, data_path: &Path, steps: usize, common: &Common) -> CliResult<()> {
    let mut run = Run::new("eval-fad", common)?;
    run.input("model", model_path);
    run.input("data", data_path);
    run.cfg.record("steps", &steps);
    run.start()?;
    let model = Tokenizer::load(model_path)?;
    let data = LatentDataset::load(data_path)?;
    let z_hat = reconstruct_set(&model, &data, steps, common.seed)?;
    let stats = gaussian_stats(&mean_pooled(&z_hat)?, data.dim)?;
    let fd = frechet_distance(&stats, &embedding_stats(&data)?)?;
    run.metrics.record(0, "eval", "frechet", fd.distance);
    run.metrics.record(
        0,
        "eval",
        "frechet_clamped_eigs",
        fd.clamped_eigenvalues as f64,
    );
    run.set("frechet", fd.distance);
    run.set("frechet_raw", fd.raw);
    run.set("clamped_eigenvalues", fd.clamped_eigenvalues);
    run.finish()
}

fn compare(
    fm: &Path,
    mse: &Path,
    splits: &[String],
    steps: usize,
    common: &Common,
) -> CliResult<()> {
    let mut run = Run::new("compare", common)?;
    run.input("fm", fm);
    run.input("mse", mse);
    run.cfg.record("steps", &steps);
    let mut named = Vec::new();
    for s in splits {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--split expects NAME=PATH, got `{s}`")))?;
        if name.is_empty() || name.contains(',') {
            return Err(CliError::Usage(format!("invalid split name `{name}`")));
        }
        run.input(&format!("split.{name}"), Path::new(path));
        named.push((name.to_string(), PathBuf::from(path)));
    }
    run.start()?;
    let models = [("fm", Tokenizer::load(fm)?), ("mse", Tokenizer::load(mse)?)];
    let sets = named
        .iter()
        .map(|(n, p)| Ok((n.as_str(), LatentDataset::load(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let split_refs: Vec<(&str, &LatentDataset)> = sets.iter().map(|(n, s)| (*n, s)).collect();
    let model_refs: Vec<(&str, &Tokenizer)> = models.iter().map(|(n, m)| (*n, m)).collect();
    let report = compare_tokenizers(&split_refs, &model_refs, steps, common.seed)?;
    std::fs::write(run.path("compare.csv"), report.to_csv())?;
    let mut doc = run.metadata();
    doc["rows"] = serde_json::to_value(&report.rows)?;
    std::fs::write(
        run.path("compare.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    for r in &report.rows {
        run.set(&format!("{}/{}/{}", r.split, r.model, r.metric), r.value);
    }
    print!("{}", report.to_csv());
    run.finish()
}

fn grad_check(common: &Common) -> CliResult<()> {
    let mut run = Run::new("grad-check", common)?;
    run.start()?;
    let results = run_gradient_suite(common.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} max_rel_error {:.3e}  tol {:.0e}  {status}",
            r.name, r.max_rel_error, r.tolerance
        );
        run.metrics.record(0, "gradcheck", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    run.set("ops", results.len());
    run.set("failed", &failed);
    run.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// Reference bitrate and its gap to the quoted figure.
pub fn bitrate_annotation() -> CliResult<(f64, String)> {
    let bps = bitrate(REFERENCE_TOKENS, REFERENCE_SECONDS, REFERENCE_CODEBOOK)?;
    let quoted = QUOTED_KBPS * 1000.0;
    let bits_per_token = quoted * REFERENCE_SECONDS / REFERENCE_TOKENS as f64;
    let note = format!(
        "{REFERENCE_TOKENS} tokens per {REFERENCE_SECONDS} s with K={REFERENCE_CODEBOOK} gives {bps:.1} bps \
         ({:.2} kbps), {:+.1}% from the quoted {QUOTED_KBPS} kbps; matching {quoted:.0} bps would need \
         {bits_per_token:.2} bits per token (an effective codebook of about {:.0} entries) or about {:.0} tokens per clip",
        bps / 1000.0,
        100.0 * (bps - quoted) / quoted,
        bits_per_token.exp2(),
        quoted * REFERENCE_SECONDS / (REFERENCE_CODEBOOK as f64).log2(),
    );
    Ok((bps, note))
}

fn report(model: Option<&Path>, clip_seconds: f64, common: &Common) -> CliResult<()> {
    let mut run = Run::new("report", common)?;
    run.cfg.record("clip_seconds", &clip_seconds);
    if let Some(p) = model {
        run.input("model", p);
    }
    run.start()?;
    let (bps, note) = bitrate_annotation()?;
    println!("reference bitrate: {bps:.1} bps");
    println!("note: {note}");
    run.metrics.record(0, "reference", "bitrate_bps", bps);
    run.metrics
        .record(0, "reference", "quoted_bps", QUOTED_KBPS * 1000.0);
    run.set("reference_bitrate_bps", bps);
    run.set("quoted_kbps", QUOTED_KBPS);
    run.set("annotation", &note);
    if let Some(p) = model {
        let m = Tokenizer::load(p)?;
        let b = m.config.bitrate(clip_seconds)?;
        println!(
            "model bitrate: {b:.1} bps ({} tokens, K={}, {clip_seconds} s)",
            m.config.seq_len, m.config.codebook_size
        );
        run.metrics.record(0, "model", "bitrate_bps", b);
        run.set("model_bitrate_bps", b);
    }
    run.finish()
}
