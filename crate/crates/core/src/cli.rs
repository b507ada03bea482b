//! Command-line front end: `train`, `sample`, `evaluate`, `ablate`, `inspect`.
//!
//! Exit codes are 0 on success, 1 for runtime failures and 2 for usage or
//! configuration errors.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ConditionKind, UViTConfig, UViTModel};
use crate::conditioning::ConditionInput;
use crate::data::{
    load_checkpoint, load_cifar10, make_toy_dataset, save_checkpoint, Checkpoint, Dataset, Split,
    ToySpec, ToyVocab, SHAPE_KINDS,
};
use crate::error::Error;
use crate::eval::{
    eval_conditions, feature_stats, frechet_distance, run_ablation, sample_grid, AblationAxis,
    AblationProtocol, EvalSettings, FeatureExtractor, SmallCnn, DESK_SCALE_NOTE,
};
use crate::samplers::{sample_model, SamplerKind, SamplerSpec};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::trainer::{train, OptimizerState, TrainConfig, TrainObserver};

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(m: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(m.into()))
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Every accepted configuration key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("preset", "model preset applied before other keys: small_cifar10, small_deep_text, mid_imagenet64, large_imagenet64"),
    ("image_size", "square image side; sets image_height and image_width"),
    ("image_height", "image height in pixels"),
    ("image_width", "image width in pixels"),
    ("channels", "image channels"),
    ("patch_size", "patch side P"),
    ("depth", "transformer blocks, odd: in-blocks + mid + out-blocks"),
    ("hidden_size", "token width D"),
    ("mlp_size", "MLP hidden width"),
    ("num_heads", "attention heads"),
    ("skip_mode", "concat_linear | add | linear_add | add_linear | none"),
    ("time_mode", "token | adaln"),
    ("conv_mode", "after_linear | before_linear | none"),
    ("patch_embed_mode", "linear | conv_stack"),
    ("pos_embed_mode", "learnable_1d | sinusoidal_2d | none"),
    ("condition", "none | class:K | context:DIM:MAX_LEN"),
    ("diffusion_steps", "number of diffusion steps T"),
    ("learning_rate", "AdamW target learning rate"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("adam_epsilon", "AdamW denominator epsilon"),
    ("batch_size", "training batch size"),
    ("total_iterations", "training iterations"),
    ("warmup_steps", "linear warmup iterations"),
    ("p_uncond", "probability of dropping the condition during training"),
    ("seed", "training seed (batches, noise, dropout)"),
    ("model_seed", "parameter initialization seed"),
    ("checkpoint_every", "iterations between checkpoints"),
    ("sampler", "ddpm_ancestral | euler_maruyama | dpm_solver"),
    ("sampling_steps", "sampler steps"),
    ("solver_order", "dpm_solver order, 1 or 2"),
    ("guidance_strength", "classifier-free guidance strength s, or none"),
    ("sample_seed", "sampling seed"),
    ("sample_count", "number of samples for the sample command"),
    ("dataset", "cifar10 | gaussian | shapes | shapes_text"),
    ("data_dir", "directory holding the CIFAR-10 binary batches"),
    ("dataset_size", "number of toy images"),
    ("dataset_seed", "toy dataset seed"),
    ("gaussian_mu", "mean of the gaussian toy set"),
    ("gaussian_sigma", "standard deviation of the gaussian toy set"),
    ("shape_kinds", "number of shape classes (2 to 4)"),
    ("class_conditional", "true to keep CIFAR-10 labels as conditions"),
    ("vocab_seed", "seed of the toy text vocabulary"),
    ("extractor", "raw_pixels | pooled_pixels | small_cnn"),
    ("feature_cnn", "optional weights file for small_cnn; seeded random weights if unset"),
    ("eval_every", "iterations between ablation evaluations"),
    ("eval_samples", "generated samples per evaluation"),
    ("output_dir", "directory for logs, checkpoints, grids and reports"),
];

fn keys_help() -> String {
    let mut s = String::from("Config keys (flat key=value file, '#' comments):\n");
    for (k, d) in CONFIG_KEYS {
        let _ = writeln!(s, "  {k:<18} {d}");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Gaussian,
    Shapes,
    ShapesText,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub size: usize,
    pub seed: u64,
    pub gaussian_mu: f64,
    pub gaussian_sigma: f64,
    pub shape_kinds: usize,
    pub class_conditional: bool,
    pub vocab_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: UViTConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub sampler: SamplerSpec,
    pub sample_count: usize,
    pub dataset: DatasetSpec,
    pub extractor: String,
    pub feature_cnn: Option<PathBuf>,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = UViTConfig::new(8, 1, 2, 5, 64, 256, 4, ConditionKind::Class { num_classes: 2 });
        model.diffusion_steps = 1000;
        Self {
            model,
            model_seed: 0,
            train: TrainConfig::default(),
            sampler: SamplerSpec::new(SamplerKind::DpmSolver, 50, 0),
            sample_count: 16,
            dataset: DatasetSpec {
                kind: DatasetKind::Shapes,
                data_dir: None,
                size: 1024,
                seed: 0,
                gaussian_mu: 0.0,
                gaussian_sigma: 0.5,
                shape_kinds: 2,
                class_conditional: true,
                vocab_seed: 0,
            },
            extractor: "raw_pixels".into(),
            feature_cnn: None,
            eval_every: 500,
            eval_samples: 1000,
            output_dir: PathBuf::from("uvit_out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{v}'")),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "preset" => {
                let steps = self.model.diffusion_steps;
                self.model = match v {
                    "small_cifar10" => UViTConfig::small_cifar10(),
                    "small_deep_text" => UViTConfig::small_deep_text(),
                    "mid_imagenet64" => UViTConfig::mid_imagenet64(),
                    "large_imagenet64" => UViTConfig::large_imagenet64(),
                    _ => return Err(format!(
                        "preset: unknown '{v}', expected one of small_cifar10, small_deep_text, mid_imagenet64, large_imagenet64"
                    )),
                };
                self.model.diffusion_steps = steps;
            }
            "learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "beta1" => self.train.betas.0 = parse_num(key, v)?,
            "beta2" => self.train.betas.1 = parse_num(key, v)?,
            "adam_epsilon" => self.train.adam_epsilon = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "total_iterations" => self.train.total_iterations = parse_num(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse_num(key, v)?,
            "p_uncond" => self.train.p_uncond = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "model_seed" => self.model_seed = parse_num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "sampler" => self.sampler.kind = v.parse().map_err(|e: Error| e.to_string())?,
            "sampling_steps" => self.sampler.steps = parse_num(key, v)?,
            "solver_order" => self.sampler.order = parse_num(key, v)?,
            "guidance_strength" => {
                self.sampler.guidance = match v {
                    "" | "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "sample_seed" => self.sampler.seed = parse_num(key, v)?,
            "sample_count" => self.sample_count = parse_num(key, v)?,
            "dataset" => {
                self.dataset.kind = match v {
                    "cifar10" => DatasetKind::Cifar10,
                    "gaussian" => DatasetKind::Gaussian,
                    "shapes" => DatasetKind::Shapes,
                    "shapes_text" => DatasetKind::ShapesText,
                    _ => return Err(format!(
                        "dataset: unknown '{v}', expected one of cifar10, gaussian, shapes, shapes_text"
                    )),
                }
            }
            "data_dir" => self.dataset.data_dir = Some(PathBuf::from(v)),
            "dataset_size" => self.dataset.size = parse_num(key, v)?,
            "dataset_seed" => self.dataset.seed = parse_num(key, v)?,
            "gaussian_mu" => self.dataset.gaussian_mu = parse_num(key, v)?,
            "gaussian_sigma" => self.dataset.gaussian_sigma = parse_num(key, v)?,
            "shape_kinds" => self.dataset.shape_kinds = parse_num(key, v)?,
            "class_conditional" => self.dataset.class_conditional = parse_bool(key, v)?,
            "vocab_seed" => self.dataset.vocab_seed = parse_num(key, v)?,
            "extractor" => {
                if !["raw_pixels", "pooled_pixels", "small_cnn"].contains(&v) {
                    return Err(format!(
                        "extractor: unknown '{v}', expected one of raw_pixels, pooled_pixels, small_cnn"
                    ));
                }
                self.extractor = v.to_string();
            }
            "feature_cnn" => self.feature_cnn = Some(PathBuf::from(v)),
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => match self.model.set(key, v) {
                Ok(true) => {}
                Ok(false) => return Err(format!("unknown key '{key}'")),
                Err(e) => return Err(e.to_string()),
            },
        }
        Ok(())
    }

    /// Parses a config document, then applies `overrides` left to right.
    /// `preset` is applied before everything else.
    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut pairs: Vec<(String, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return usage(format!("line {}: expected key=value, got '{line}'", i + 1));
            };
            pairs.push((k.trim().into(), v.trim().into(), format!("line {}", i + 1)));
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return usage(format!("--override {o}: expected key=value"));
            };
            pairs.push((k.trim().into(), v.trim().into(), format!("--override {o}")));
        }
        let mut cfg = RunConfig::default();
        let (presets, rest): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|p| p.0 == "preset");
        for (k, v, at) in presets.into_iter().chain(rest) {
            cfg.set(&k, &v)
                .map_err(|e| CliError::Usage(format!("{at}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |e: Error| CliError::Usage(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        let schedule = self.schedule().map_err(cfg)?;
        self.sampler.validate(&schedule).map_err(cfg)?;
        let m = &self.model;
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Cifar10 => {
                let Some(dir) = &d.data_dir else {
                    return usage("dataset=cifar10 needs data_dir");
                };
                if !dir.is_dir() {
                    return usage(format!("data_dir {} does not exist", dir.display()));
                }
                if (m.image_height, m.image_width, m.channels) != (32, 32, 3) {
                    return usage("cifar10 needs image_size=32 and channels=3");
                }
                let want = if d.class_conditional {
                    ConditionKind::Class { num_classes: 10 }
                } else {
                    ConditionKind::None
                };
                if m.condition != want {
                    return usage(format!("cifar10 with class_conditional={} needs condition={want}", d.class_conditional));
                }
            }
            DatasetKind::Gaussian => {
                if m.condition != ConditionKind::None {
                    return usage("gaussian data is unconditional: set condition=none");
                }
            }
            DatasetKind::Shapes | DatasetKind::ShapesText => {
                if m.channels != 1
                    || m.image_height != m.image_width
                    || !(m.image_height == 8 || m.image_height == 16)
                {
                    return usage("shapes need channels=1 and image_size 8 or 16");
                }
                let ok = match (d.kind, m.condition) {
                    (DatasetKind::Shapes, ConditionKind::Class { num_classes }) => {
                        num_classes == d.shape_kinds
                    }
                    (DatasetKind::Shapes, ConditionKind::None) => true,
                    (DatasetKind::ShapesText, ConditionKind::Context { .. }) => true,
                    _ => false,
                };
                if !ok {
                    return usage(format!(
                        "dataset {:?} is incompatible with condition={}",
                        d.kind, m.condition
                    ));
                }
            }
        }
        if self.extractor != "small_cnn" && self.feature_cnn.is_some() {
            return usage("feature_cnn is only used with extractor=small_cnn");
        }
        if let Some(p) = &self.feature_cnn {
            if !p.is_file() {
                return usage(format!("feature_cnn {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> crate::error::Result<NoiseSchedule> {
        NoiseSchedule::linear(self.model.diffusion_steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    pub fn extractor(&self) -> CliResult<FeatureExtractor> {
        Ok(match self.extractor.as_str() {
            "raw_pixels" => FeatureExtractor::RawPixels,
            "pooled_pixels" => FeatureExtractor::PooledPixels,
            _ => FeatureExtractor::SmallCnn(match &self.feature_cnn {
                Some(p) => SmallCnn::load(p).map_err(runtime)?,
                None => SmallCnn::random(self.model.channels, &[16, 32], 0),
            }),
        })
    }
}

/// Prompt per shape kind for the text-conditioned toy set.
pub fn shape_prompts(kinds: usize) -> Vec<String> {
    const ADJ: [&str; 4] = ["filled", "plus", "hollow", "horizontal"];
    (0..kinds)
        .map(|k| format!("a {} {}", ADJ[k], SHAPE_KINDS[k]))
        .collect()
}

fn shape_vocab(kinds: usize, context_dim: usize, seed: u64) -> ToyVocab {
    let words: Vec<String> = shape_prompts(kinds)
        .iter()
        .flat_map(|p| p.split_whitespace().map(String::from).collect::<Vec<_>>())
        .collect();
    ToyVocab::new(&words, context_dim, seed)
}

pub fn build_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let d = &cfg.dataset;
    let m = &cfg.model;
    let ds = match d.kind {
        DatasetKind::Cifar10 => {
            let dir = d.data_dir.as_deref().expect("validated");
            load_cifar10(dir, Split::Train, d.class_conditional).map_err(runtime)?
        }
        DatasetKind::Gaussian => make_toy_dataset(
            &ToySpec::Gaussian {
                mu: d.gaussian_mu,
                sigma: d.gaussian_sigma,
                size: m.image_height,
                channels: m.channels,
            },
            d.size,
            d.seed,
        )
        .map_err(|e| CliError::Usage(e.to_string()))?,
        DatasetKind::Shapes | DatasetKind::ShapesText => {
            let mut ds = make_toy_dataset(
                &ToySpec::Shapes {
                    kinds: d.shape_kinds,
                    size: m.image_height,
                },
                d.size,
                d.seed,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            match m.condition {
                ConditionKind::None => ds = ds.unconditional(),
                ConditionKind::Context {
                    context_dim,
                    max_len,
                } => {
                    let vocab = shape_vocab(d.shape_kinds, context_dim, d.vocab_seed);
                    let prompts = shape_prompts(d.shape_kinds);
                    ds.conditions = ds
                        .labels()
                        .into_iter()
                        .map(|l| vocab.encode(&prompts[l.unwrap_or(0)], max_len))
                        .collect();
                }
                ConditionKind::Class { .. } => {}
            }
            ds
        }
    };
    Ok(ds)
}

fn checkpoint_metadata(cfg: &RunConfig) -> Vec<(String, String)> {
    let d = &cfg.dataset;
    let mut meta = vec![
        ("dataset".to_string(), format!("{:?}", d.kind).to_lowercase()),
        ("model_seed".to_string(), cfg.model_seed.to_string()),
        ("train_seed".to_string(), cfg.train.seed.to_string()),
    ];
    if d.kind == DatasetKind::ShapesText {
        meta.push(("vocab_seed".into(), d.vocab_seed.to_string()));
        meta.push(("shape_kinds".into(), d.shape_kinds.to_string()));
    }
    meta
}

struct CliObserver {
    dir: PathBuf,
    log: fs::File,
    metadata: Vec<(String, String)>,
    written: Vec<PathBuf>,
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, iteration: usize, loss: f64, lr: f64) -> crate::error::Result<()> {
        writeln!(self.log, "{iteration}\t{loss}\t{lr}")?;
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        iteration: usize,
        model: &UViTModel,
        optimizer: &OptimizerState,
        rng: &ChaCha8Rng,
    ) -> crate::error::Result<()> {
        self.log.flush()?;
        let mut ck = Checkpoint::from_model(model, iteration as u64, Some(optimizer), Some(rng));
        ck.metadata = self.metadata.clone();
        let path = self.dir.join(format!("checkpoint_{iteration:08}.uvtc"));
        save_checkpoint(&ck, &path)?;
        eprintln!("iteration {iteration}: wrote {}", path.display());
        self.written.push(path);
        Ok(())
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_train(config: &Path, overrides: &[String]) -> CliResult<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let dataset = build_dataset(&cfg)?;
    if cfg.train.batch_size > dataset.len() {
        return usage(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.train.batch_size,
            dataset.len()
        ));
    }
    create_dir(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("metrics.log");
    let log = fs::File::create(&log_path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", log_path.display())))?;
    let schedule = cfg.schedule().map_err(runtime)?;
    let mut model = UViTModel::build(cfg.model.clone(), cfg.model_seed).map_err(runtime)?;
    eprintln!(
        "training {} parameters on {} images ({})",
        model.count_params(),
        dataset.len(),
        dataset.name
    );
    let mut obs = CliObserver {
        dir: cfg.output_dir.clone(),
        log,
        metadata: checkpoint_metadata(&cfg),
        written: Vec::new(),
    };
    let summary = train(&mut model, &dataset, &schedule, &cfg.train, &mut obs).map_err(runtime)?;
    obs.log.flush().map_err(|e| runtime(e.into()))?;
    eprintln!(
        "done: mean loss over the last 100 iterations {:.6}",
        summary.tail_mean(100)
    );
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// ddpm_ancestral | euler_maruyama | dpm_solver
    #[arg(long, default_value = "dpm_solver")]
    pub sampler: String,
    /// Sampler steps (ddpm_ancestral needs the full chain length T).
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// dpm_solver order, 1 or 2.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Classifier-free guidance strength s.
    #[arg(long = "guidance-strength")]
    pub guidance_strength: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Grid layout ROWSxCOLS; defaults to the smallest square that fits.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class label for every sample (class-conditional models).
    #[arg(long)]
    pub class: Option<usize>,
    /// Prompt for every sample (text-conditioned toy models).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Output PPM path.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let parsed = s
        .split_once('x')
        .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)));
    match parsed {
        Some((r, c)) if r > 0 && c > 0 => Ok((r, c)),
        _ => usage(format!("--grid: expected ROWSxCOLS, got '{s}'")),
    }
}

fn sample_conditions(
    ck: &Checkpoint,
    count: usize,
    class: Option<usize>,
    prompt: Option<&str>,
) -> CliResult<Vec<ConditionInput>> {
    match ck.config.condition {
        ConditionKind::None => {
            if class.is_some() || prompt.is_some() {
                return usage("checkpoint is unconditional: --class and --prompt do not apply");
            }
            Ok(vec![ConditionInput::Unconditional; count])
        }
        ConditionKind::Class { num_classes } => {
            if prompt.is_some() {
                return usage("checkpoint is class-conditional: use --class, not --prompt");
            }
            match class {
                Some(k) if k >= num_classes => {
                    usage(format!("--class {k} outside 0..{num_classes}"))
                }
                Some(k) => Ok(vec![ConditionInput::Class(k); count]),
                None => Ok((0..count).map(|i| ConditionInput::Class(i % num_classes)).collect()),
            }
        }
        ConditionKind::Context {
            context_dim,
            max_len,
        } => {
            if class.is_some() {
                return usage("checkpoint is text-conditioned: use --prompt, not --class");
            }
            let seed = ck.metadata_value("vocab_seed").and_then(|v| v.parse().ok());
            let kinds = ck.metadata_value("shape_kinds").and_then(|v| v.parse().ok());
            let (Some(seed), Some(kinds)) = (seed, kinds) else {
                return usage("checkpoint does not record a toy vocabulary");
            };
            let vocab = shape_vocab(kinds, context_dim, seed);
            let prompts = match prompt {
                Some(p) => vec![p.to_string()],
                None => shape_prompts(kinds),
            };
            Ok((0..count)
                .map(|i| vocab.encode(&prompts[i % prompts.len()], max_len))
                .collect())
        }
    }
}

pub fn cmd_sample(args: &SampleArgs) -> CliResult<()> {
    if !args.checkpoint.is_file() {
        return usage(format!("checkpoint {} not found", args.checkpoint.display()));
    }
    let kind: SamplerKind = args
        .sampler
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    if args.count == 0 {
        return usage("--count must be positive");
    }
    let (rows, cols) = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => {
            let cols = (args.count as f64).sqrt().ceil() as usize;
            ((args.count / cols).max(1), cols)
        }
    };
    if rows * cols > args.count {
        return usage(format!(
            "--grid {rows}x{cols} needs {} samples, --count is {}",
            rows * cols,
            args.count
        ));
    }
    let ck = load_checkpoint(&args.checkpoint).map_err(runtime)?;
    let model = ck.to_model().map_err(runtime)?;
    let spec = SamplerSpec {
        kind,
        steps: args.steps,
        order: args.order,
        guidance: args.guidance_strength,
        seed: args.seed,
    };
    let schedule = NoiseSchedule::linear(ck.config.diffusion_steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
        .map_err(runtime)?;
    spec.validate(&schedule)
        .map_err(|e| CliError::Usage(format!("sampler flags do not fit the checkpoint: {e}")))?;
    if spec.guidance.is_some() && ck.config.condition == ConditionKind::None {
        return usage("--guidance-strength needs a conditional checkpoint");
    }
    let conds = sample_conditions(&ck, args.count, args.class, args.prompt.as_deref())?;
    if spec.guidance.is_some() && conds.iter().any(ConditionInput::is_null) {
        return usage("guidance needs a non-empty prompt");
    }
    let images = sample_model(&model, &schedule, &spec, &conds).map_err(runtime)?;
    sample_grid(&images, rows, cols, &args.out).map_err(runtime)?;
    eprintln!("wrote {} ({rows}x{cols})", args.out.display());
    Ok(())
}

pub fn cmd_evaluate(config: &Path, checkpoint: &Path, overrides: &[String]) -> CliResult<()> {
    let cfg = RunConfig::load(config, overrides)?;
    if !checkpoint.is_file() {
        return usage(format!("checkpoint {} not found", checkpoint.display()));
    }
    let ck = load_checkpoint(checkpoint).map_err(runtime)?;
    let m = &ck.config;
    let c = &cfg.model;
    if (m.image_height, m.image_width, m.channels, m.condition)
        != (c.image_height, c.image_width, c.channels, c.condition)
    {
        return usage("checkpoint image shape or condition differs from the config's dataset");
    }
    let dataset = build_dataset(&cfg)?;
    let model = ck.to_model().map_err(runtime)?;
    let schedule = NoiseSchedule::linear(m.diffusion_steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
        .map_err(runtime)?;
    cfg.sampler.validate(&schedule).map_err(|e| CliError::Usage(e.to_string()))?;
    let extractor = cfg.extractor()?;
    if cfg.eval_samples < 2 {
        return usage("eval_samples must be at least 2");
    }
    let conds = eval_conditions(&dataset, cfg.eval_samples);
    let samples = sample_model(&model, &schedule, &cfg.sampler, &conds).map_err(runtime)?;
    let gen = feature_stats(&samples.map(|v| v.clamp(-1.0, 1.0)), &extractor).map_err(runtime)?;
    let reference = feature_stats(&dataset.images, &extractor).map_err(runtime)?;
    let fd = frechet_distance(&gen, &reference).map_err(runtime)?;
    create_dir(&cfg.output_dir)?;
    let name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let csv = format!("variant,iteration,metric\n{name},{},{fd}\n", ck.iteration);
    let path = cfg.output_dir.join("evaluate.csv");
    fs::write(&path, csv).map_err(|e| runtime(e.into()))?;
    eprintln!("{DESK_SCALE_NOTE}");
    println!("frechet_distance\t{fd}");
    Ok(())
}

pub fn cmd_ablate(
    config: &Path,
    axis: &str,
    variants: &str,
    overrides: &[String],
) -> CliResult<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let axis: AblationAxis = axis
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let variants: Vec<String> = variants
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let protocol = AblationProtocol {
        axis,
        variants,
        eval_every: cfg.eval_every.min(cfg.train.total_iterations),
        eval_samples: cfg.eval_samples,
        total_iterations: cfg.train.total_iterations,
    };
    protocol
        .validate(&cfg.model)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset = build_dataset(&cfg)?;
    let settings = EvalSettings {
        sampler: cfg.sampler.clone(),
        extractor: cfg.extractor()?,
    };
    create_dir(&cfg.output_dir)?;
    eprintln!("{DESK_SCALE_NOTE}");
    let report = run_ablation(&protocol, &cfg.model, &dataset, &cfg.train, &settings, cfg.model_seed)
        .map_err(runtime)?;
    let csv = cfg.output_dir.join(format!("ablation_{axis}.csv"));
    fs::write(&csv, report.to_csv()).map_err(|e| runtime(e.into()))?;
    let losses = cfg.output_dir.join(format!("ablation_{axis}_final_loss.csv"));
    fs::write(&losses, report.final_loss_csv()).map_err(|e| runtime(e.into()))?;
    print!("{}", report.to_csv());
    let failed: Vec<&str> = report
        .outcomes
        .iter()
        .filter(|o| o.error.is_some())
        .map(|o| o.variant.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!(
            "variants failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// Human-readable checkpoint summary.
pub fn inspect_text(ck: &Checkpoint) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "iteration {}", ck.iteration);
    let _ = writeln!(s, "parameters {}", ck.param_count());
    let _ = writeln!(s, "[config]");
    for (k, v) in ck.config.to_pairs() {
        let _ = writeln!(s, "{k}={v}");
    }
    for (k, v) in &ck.metadata {
        let _ = writeln!(s, "meta.{k}={v}");
    }
    let _ = writeln!(
        s,
        "optimizer {}",
        ck.optimizer
            .as_ref()
            .map(|o| format!("step {}", o.step))
            .unwrap_or_else(|| "absent".into())
    );
    let _ = writeln!(s, "[tensors]");
    for (name, t) in &ck.tensors {
        let _ = writeln!(s, "{name} {:?}", t.shape());
    }
    s
}

pub fn cmd_inspect(checkpoint: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint).map_err(runtime)?;
    print!("{}", inspect_text(&ck));
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "uvit", version, about = "U-ViT diffusion backbone: train, sample, evaluate, ablate, inspect")]
#[command(after_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes metrics.log and checkpoints to output_dir.
    #[command(after_help = keys_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// key=value applied after the file, left to right.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Sample a checkpoint into a PPM grid.
    Sample(SampleArgs),
    /// Fréchet distance between checkpoint samples and the config's dataset.
    #[command(after_help = keys_help())]
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Train one model per variant along an axis and write a CSV report.
    #[command(after_help = keys_help())]
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// skip_mode | time_mode | conv_mode | patch_embed_mode | pos_embed_mode | depth | width | patch_size
        #[arg(long)]
        axis: String,
        /// Comma-separated variant values.
        #[arg(long)]
        variants: String,
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Print a checkpoint's config, iteration, parameter count and tensor shapes.
    Inspect { checkpoint: PathBuf },
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("UVIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("UVIT_THREADS must be an integer, got '{v}'")))?;
    if n > 0 {
        // A pool that already exists (repeated calls in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Train { config, overrides } => cmd_train(config, overrides),
        Command::Sample(a) => cmd_sample(a),
        Command::Evaluate {
            config,
            checkpoint,
            overrides,
        } => cmd_evaluate(config, checkpoint, overrides),
        Command::Ablate {
            config,
            axis,
            variants,
            overrides,
        } => cmd_ablate(config, axis, variants, overrides),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
