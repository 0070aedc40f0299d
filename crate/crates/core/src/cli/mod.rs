//! Command-line front end: `synth`, `extract`, `train`, `predict` and
//! `evaluate`, driven by a TOML run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, the
//! `MGICNN_DATA_DIR` / `MGICNN_CACHE_DIR` / `MGICNN_OUTPUT_DIR` environment
//! variables (path roots only), then command-line flags. The top-level
//! `seed` is copied into every stochastic component.

mod commands;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_BOOTSTRAP, DEFAULT_THRESHOLD};
use crate::experiment::desk_train_config;
use crate::model::{Fusion, ModelConfig, Variant};
use crate::synthetic::SyntheticSpec;
use crate::training::{TrainConfig, DEFAULT_FOLDS};

pub use commands::{cmd_evaluate, cmd_extract, cmd_predict, cmd_synth, cmd_train, ExtractSummary, CACHE_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const ENV_DATA_DIR: &str = "MGICNN_DATA_DIR";
pub const ENV_CACHE_DIR: &str = "MGICNN_CACHE_DIR";
pub const ENV_OUTPUT_DIR: &str = "MGICNN_OUTPUT_DIR";

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::UnknownTag(_) => EXIT_USAGE,
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Synthetic or prepared dataset: `volumes/`, `candidates.csv`, `annotations.csv`.
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            cache_dir: "cache".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// Desk-scale widths.
    Small,
    /// Full-size widths.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub fusion: Fusion,
    pub size: ModelSize,
    /// Explicit widths override the size preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_channels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_channels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fc_widths: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Mgi,
            fusion: Fusion::Sum,
            size: ModelSize::Small,
            stage_channels: None,
            head_channels: None,
            fc_widths: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, dropout: f64) -> Result<ModelConfig> {
        let mut c = match self.size {
            ModelSize::Small => ModelConfig::small(self.variant),
            ModelSize::Full => ModelConfig::default_for(self.variant),
        };
        c.fusion = self.fusion;
        if let Some(v) = &self.stage_channels {
            c.stage_channels = v.clone();
        }
        if let Some(v) = &self.head_channels {
            c.head_channels = v.clone();
        }
        if let Some(v) = &self.fc_widths {
            c.fc_widths = v.clone();
        }
        c.dropout_rate = dropout;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub bootstrap: usize,
    pub threshold: f64,
    /// Scan count for FP/scan; defaults to the distinct series seen.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_scans: Option<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            bootstrap: DEFAULT_BOOTSTRAP,
            threshold: DEFAULT_THRESHOLD,
            num_scans: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Threads for the data stages (synth, extract).
    pub workers: usize,
    pub folds: usize,
    /// Single fold to train/predict; all folds when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub paths: PathsConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            folds: DEFAULT_FOLDS,
            fold: None,
            paths: PathsConfig::default(),
            model: ModelSection::default(),
            train: desk_train_config(),
            synthetic: SyntheticSpec::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a (possibly partial) file; keys it leaves out keep the values
    /// of [`RunConfig::default`], section by section.
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::InvalidConfig(e.to_string());
        let file: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| bad(&e))?;
        merge(&mut base, file);
        base.try_into().map_err(|e| bad(&e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Copies the top-level seed into every section and checks ranges.
    pub fn finalize(mut self) -> Result<Self> {
        self.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        if let Some(f) = self.fold {
            if f >= self.folds {
                return Err(Error::InvalidConfig(format!("fold {f} out of range 0..{}", self.folds)));
            }
        }
        self.train.validate()?;
        self.synthetic.validate()?;
        self.model_config()?;
        Ok(self)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(self.train.dropout)
    }

    /// Fold indices selected by `fold`.
    pub fn selected_folds(&self) -> Vec<usize> {
        match self.fold {
            Some(f) => vec![f],
            None => (0..self.folds).collect(),
        }
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{command}.config.toml"));
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mgicnn", version, about = "Nodule candidate false-positive reduction with multi-scale 3D CNNs")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the data directory.
    Synth(SynthArgs),
    /// Extract multi-scale patches for every candidate into the cache.
    Extract,
    /// Train one model per fold.
    Train(TrainArgs),
    /// Score the held-out candidates of each fold.
    Predict(PredictArgs),
    /// FROC, CPM, confusion counts and FP triage for a prediction file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub num_scans: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// MGI, RI, LR, ZI or ZO.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// concat, sum or conv1x1.
    #[arg(long)]
    pub fusion: Option<Fusion>,
    #[arg(long, value_enum)]
    pub size: Option<ModelSize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint to use; requires a single `--fold`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to `<output_dir>/predictions.csv`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Defaults to `<data_dir>/annotations.csv`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub num_scans: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(s) = self.size {
            cfg.model.size = s;
        }
        if let Some(k) = self.folds {
            cfg.folds = k;
        }
        if self.fold.is_some() {
            cfg.fold = self.fold;
        }
    }
}

/// Builds the effective configuration from file, environment and flags.
pub fn effective_config(cli: &Cli, env: impl Fn(&str) -> Option<OsString>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (var, slot) in [
        (ENV_DATA_DIR, &mut cfg.paths.data_dir),
        (ENV_CACHE_DIR, &mut cfg.paths.cache_dir),
        (ENV_OUTPUT_DIR, &mut cfg.paths.output_dir),
    ] {
        if let Some(v) = env(var).filter(|v| !v.is_empty()) {
            *slot = v.into();
        }
    }
    for (flag, slot) in [
        (&cli.data_dir, &mut cfg.paths.data_dir),
        (&cli.cache_dir, &mut cfg.paths.cache_dir),
        (&cli.output_dir, &mut cfg.paths.output_dir),
    ] {
        if let Some(p) = flag {
            *slot = p.clone();
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.num_scans {
                cfg.synthetic.num_scans = n;
            }
        }
        Command::Extract => {}
        Command::Train(a) => {
            a.model.apply(&mut cfg);
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.train.base_lr = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(d) = a.dropout {
                cfg.train.dropout = d;
            }
        }
        Command::Predict(a) => a.model.apply(&mut cfg),
        Command::Evaluate(a) => {
            if let Some(b) = a.bootstrap {
                cfg.evaluation.bootstrap = b;
            }
            if let Some(t) = a.threshold {
                cfg.evaluation.threshold = t;
            }
            if a.num_scans.is_some() {
                cfg.evaluation.num_scans = a.num_scans;
            }
        }
    }
    cfg.finalize()
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<i32> {
    match &cli.command {
        Command::Synth(_) => cmd_synth(cfg).map(|_| EXIT_OK),
        Command::Extract => {
            let s = cmd_extract(cfg)?;
            println!("{}", s.summary_line());
            Ok(if s.missing_series.is_empty() { EXIT_OK } else { EXIT_DATA })
        }
        Command::Train(_) => cmd_train(cfg).map(|_| EXIT_OK),
        Command::Predict(a) => cmd_predict(cfg, a.checkpoint.as_deref()).map(|_| EXIT_OK),
        Command::Evaluate(a) => cmd_evaluate(cfg, a.predictions.as_deref(), a.gt.as_deref()).map(|_| EXIT_OK),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = effective_config(&cli, |k| std::env::var_os(k)).and_then(|cfg| dispatch(&cli, &cfg));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
