//! Flag and config-file resolution. Flags win over the file, the file over defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use topn_rank::dataset::{DEFAULT_MIN_COUNT, DEFAULT_THRESHOLD};
use topn_rank::eval::DEFAULT_CUTOFFS;
use topn_rank::objective::DEFAULT_SIGMOID_SCALE;
use topn_rank::{Algorithm, Error, Smoothing, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKind {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmArg {
    Generic,
    FastRelu,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Generic => Algorithm::Generic,
            AlgorithmArg::FastRelu => Algorithm::FastRelu,
        }
    }
}

/// Keys accepted in a `--config` TOML file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub min_count: Option<usize>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub top_n: Option<usize>,
    pub truncate: Option<bool>,
    pub smoothing: Option<SmoothingKind>,
    pub sigmoid_c: Option<f64>,
    pub algorithm: Option<AlgorithmArg>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub batch_frac: Option<f64>,
    pub max_iters: Option<usize>,
    pub epsilon: Option<f64>,
    pub repeats: Option<usize>,
    pub cutoffs: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFileArg {
    /// TOML file with defaults for any of the flags below.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Drop users with fewer ratings than this.
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Ratings at or above this are relevant.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Latent factor dimension.
    #[arg(long)]
    pub k: Option<usize>,
    /// Truncation cutoff N of the training objective.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Train the untruncated objective.
    #[arg(long)]
    pub no_truncate: bool,
    #[arg(long, value_enum)]
    pub smoothing: Option<SmoothingKind>,
    /// Sigmoid scale C (sigmoid smoothing only).
    #[arg(long)]
    pub sigmoid_c: Option<f64>,
    /// Defaults to fast-relu for relu smoothing and generic otherwise.
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Regularization coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fraction of active users per mini-batch.
    #[arg(long)]
    pub batch_frac: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Stop once the squared parameter change of an iteration falls below this.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RepeatArgs {
    /// Number of random half splits.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CutoffArgs {
    /// Comma-separated NDCG cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub cutoffs: Option<Vec<usize>>,
}

pub const DEFAULT_REPEATS: usize = 5;

pub fn resolve_min_count(args: &DataArgs, file: &FileConfig) -> usize {
    args.min_count.or(file.min_count).unwrap_or(DEFAULT_MIN_COUNT)
}

pub fn resolve_threshold(args: &DataArgs, file: &FileConfig) -> f64 {
    args.threshold.or(file.threshold).unwrap_or(DEFAULT_THRESHOLD)
}

pub fn resolve_seed(seed: Option<u64>, file: &FileConfig) -> u64 {
    seed.or(file.seed).unwrap_or(0)
}

pub fn resolve_repeats(args: &RepeatArgs, file: &FileConfig) -> Result<usize, Error> {
    let repeats = args.repeats.or(file.repeats).unwrap_or(DEFAULT_REPEATS);
    if repeats == 0 {
        return Err(Error::InvalidConfig("--repeats must be >= 1".into()));
    }
    Ok(repeats)
}

pub fn resolve_cutoffs(args: &CutoffArgs, file: &FileConfig) -> Result<Vec<usize>, Error> {
    let cutoffs = args
        .cutoffs
        .clone()
        .or_else(|| file.cutoffs.clone())
        .unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec());
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::InvalidConfig("--cutoffs must be positive integers".into()));
    }
    Ok(cutoffs)
}

pub fn resolve_train_config(args: &ModelArgs, file: &FileConfig) -> Result<TrainConfig, Error> {
    let defaults = TrainConfig::default();
    let kind = args.smoothing.or(file.smoothing).unwrap_or(SmoothingKind::Relu);
    let scale = args.sigmoid_c.or(file.sigmoid_c);
    let smoothing = match kind {
        SmoothingKind::Relu => {
            if args.sigmoid_c.is_some() {
                return Err(Error::InvalidConfig("--sigmoid-c requires --smoothing sigmoid".into()));
            }
            Smoothing::Relu
        }
        SmoothingKind::Sigmoid => Smoothing::Sigmoid {
            scale: scale.unwrap_or(DEFAULT_SIGMOID_SCALE),
        },
    };
    let algorithm = args
        .algorithm
        .or(file.algorithm)
        .map(Algorithm::from)
        .unwrap_or_else(|| Algorithm::for_smoothing(&smoothing));
    let truncated = if args.no_truncate {
        false
    } else {
        file.truncate.unwrap_or(defaults.truncated)
    };
    let config = TrainConfig {
        k: args.k.or(file.k).unwrap_or(defaults.k),
        top_n: args.top_n.or(file.top_n).unwrap_or(defaults.top_n),
        learning_rate: args.lr.or(file.lr).unwrap_or(defaults.learning_rate),
        lambda: args.lambda.or(file.lambda).unwrap_or(defaults.lambda),
        batch_fraction: args.batch_frac.or(file.batch_frac).unwrap_or(defaults.batch_fraction),
        max_iters: args.max_iters.or(file.max_iters).unwrap_or(defaults.max_iters),
        epsilon: args.epsilon.or(file.epsilon).unwrap_or(defaults.epsilon),
        seed: resolve_seed(args.seed, file),
        smoothing,
        truncated,
        algorithm,
        ..defaults
    };
    config.validate()?;
    Ok(config)
}
