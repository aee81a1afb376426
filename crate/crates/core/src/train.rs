//! Mini-batch SGD driver shared by both trainers.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::fast::{sgd_step_fast, user_data_loss_fast};
use crate::model::{dot, init_model, relu_init_width, InitSpec, LatentFactorModel};
use crate::objective::{sgd_step_generic, user_data_loss, GainMode, ObjectiveSpec, OpCounts, Smoothing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Pairwise gradient, any smoothing, `O(k n' m̃²)` per iteration.
    Generic,
    /// Sorted prefix-sum pass, rectifier only, `O(n' m̃ (k + log m̃))` per iteration.
    FastRelu,
}

impl Algorithm {
    /// The cheapest algorithm that supports `smoothing`.
    pub fn for_smoothing(smoothing: &Smoothing) -> Self {
        if smoothing.is_relu() {
            Algorithm::FastRelu
        } else {
            Algorithm::Generic
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Generic => "generic",
            Algorithm::FastRelu => "fast-relu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub top_n: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_fraction: f64,
    pub max_iters: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub smoothing: Smoothing,
    pub truncated: bool,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub gain_mode: GainMode,
    /// Uniform init width; `None` means `2 / (7k)^(1/4)`.
    #[serde(default)]
    pub init_width: Option<f64>,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            top_n: 20,
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda: 0.1,
            batch_fraction: 0.10,
            max_iters: 30,
            epsilon: 0.1,
            seed: 0,
            smoothing: Smoothing::Relu,
            truncated: true,
            algorithm: Algorithm::FastRelu,
            gain_mode: GainMode::Standard,
            init_width: None,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            top_n: self.top_n,
            lambda: self.lambda,
            smoothing: self.smoothing,
            truncated: self.truncated,
            gain_mode: self.gain_mode,
        }
    }

    pub fn init_spec(&self) -> Result<InitSpec> {
        Ok(InitSpec {
            width: match self.init_width {
                Some(w) => w,
                None => relu_init_width(self.k)?,
            },
            seed: derive_seed(self.seed, SEED_STREAM_INIT),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "batch fraction must be in (0, 1], got {}",
                self.batch_fraction
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.algorithm == Algorithm::FastRelu && !self.smoothing.is_relu() {
            return Err(Error::InvalidConfig(
                "algorithm fast-relu requires relu smoothing".into(),
            ));
        }
        if let Some(w) = self.init_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("init width must be > 0, got {w}")));
            }
        }
        Ok(())
    }
}

const SEED_STREAM_INIT: u64 = 1;
const SEED_STREAM_BATCH: u64 = 2;

/// Derives an independent seed for a named stream from a base seed (SplitMix64).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Converged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxIters => "max_iters",
            StopReason::Converged => "converged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Batch objective at the start of the iteration.
    pub batch_loss: f64,
    /// Sum of squared parameter changes over the iteration.
    pub param_delta: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub counts: OpCounts,
}

impl TrainingLog {
    /// Tab-separated, one row per iteration, stop reason in a trailing comment.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration\tbatch_loss\tparam_delta\tseconds")?;
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}",
                r.iteration, r.batch_loss, r.param_delta, r.seconds
            )?;
        }
        writeln!(out, "# stop_reason\t{}", self.stop_reason)
    }
}

/// Batch objective: data loss of each user plus `λ‖θ‖²` over touched rows.
pub fn batch_loss(
    model: &LatentFactorModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    spec: &ObjectiveSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for &u in batch {
        let xs = dataset.user(u);
        total += if spec.smoothing.is_relu() {
            user_data_loss_fast(model, u, xs, spec)?
        } else {
            user_data_loss(model, u, xs, spec)?
        };
    }
    let rows = TouchedRows::new(dataset, batch);
    let reg: f64 = rows.users.iter().map(|&u| dot(model.user_row(u), model.user_row(u))).sum::<f64>()
        + rows.items.iter().map(|&i| dot(model.item_row(i), model.item_row(i))).sum::<f64>();
    Ok(total + spec.lambda * reg)
}

/// Distinct user and item rows a batch will update.
struct TouchedRows {
    users: Vec<usize>,
    items: Vec<usize>,
}

impl TouchedRows {
    fn new(dataset: &InteractionDataset, batch: &[usize]) -> Self {
        let mut users = batch.to_vec();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<usize> = users.iter().flat_map(|&u| dataset.user(u).iter().map(|x| x.item)).collect();
        items.sort_unstable();
        items.dedup();
        TouchedRows { users, items }
    }

    fn snapshot(&self, model: &LatentFactorModel) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.users.len() + self.items.len()) * model.k());
        for &u in &self.users {
            out.extend_from_slice(model.user_row(u));
        }
        for &i in &self.items {
            out.extend_from_slice(model.item_row(i));
        }
        out
    }

    fn squared_change(&self, model: &LatentFactorModel, before: &[f64]) -> f64 {
        let rows = self
            .users
            .iter()
            .map(|&u| model.user_row(u))
            .chain(self.items.iter().map(|&i| model.item_row(i)));
        before
            .chunks_exact(model.k())
            .zip(rows)
            .map(|(old, new)| old.iter().zip(new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum()
    }
}

/// Runs one SGD pass over `batch` with the configured algorithm.
pub fn sgd_step(
    model: &mut LatentFactorModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    config: &TrainConfig,
    counts: &mut OpCounts,
) -> Result<f64> {
    let spec = config.objective();
    match config.algorithm {
        Algorithm::Generic => sgd_step_generic(model, dataset, batch, &spec, config.learning_rate, counts),
        Algorithm::FastRelu => sgd_step_fast(model, dataset, batch, &spec, config.learning_rate, counts),
    }
}

/// Number of users per batch: `ceil(fraction · active)`, at least one.
pub fn batch_size(active_users: usize, fraction: f64) -> usize {
    ((fraction * active_users as f64).ceil() as usize).clamp(1, active_users.max(1))
}

/// Initializes a model from the config and trains it.
pub fn train(dataset: &InteractionDataset, config: &TrainConfig) -> Result<(LatentFactorModel, TrainingLog)> {
    config.validate()?;
    let model = init_model(dataset.n_users(), dataset.n_items(), config.k, &config.init_spec()?)?;
    train_from(model, dataset, config)
}

/// Trains an existing model in place of a fresh initialization.
///
/// Each iteration draws `ceil(batch_fraction · active_users)` users without
/// replacement, records the batch objective, applies one sequential SGD pass,
/// and stops once the squared parameter change falls below `epsilon` or
/// `max_iters` iterations have run.
pub fn train_from(
    mut model: LatentFactorModel,
    dataset: &InteractionDataset,
    config: &TrainConfig,
) -> Result<(LatentFactorModel, TrainingLog)> {
    config.validate()?;
    if model.n_users() != dataset.n_users() || model.n_items() != dataset.n_items() || model.k() != config.k {
        return Err(Error::ItemSpaceMismatch(format!(
            "model {}x{}x{} does not fit dataset {}x{} with k={}",
            model.n_users(),
            model.n_items(),
            model.k(),
            dataset.n_users(),
            dataset.n_items(),
            config.k
        )));
    }
    let active = dataset.active_users();
    if active.is_empty() {
        return Err(Error::Empty("dataset has no users with interactions".into()));
    }
    let size = batch_size(active.len(), config.batch_fraction);
    let spec = config.objective();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SEED_STREAM_BATCH));
    let mut log = TrainingLog {
        records: Vec::new(),
        stop_reason: StopReason::MaxIters,
        counts: OpCounts::default(),
    };

    for iteration in 0..config.max_iters {
        let started = Instant::now();
        let batch: Vec<usize> = rand::seq::index::sample(&mut rng, active.len(), size)
            .into_iter()
            .map(|p| active[p])
            .collect();
        let at_iteration = |e: Error| match e {
            Error::Diverged { user, score, .. } => Error::Diverged {
                iteration,
                user,
                score,
            },
            other => other,
        };
        let loss = batch_loss(&model, dataset, &batch, &spec).map_err(at_iteration)?;
        let rows = TouchedRows::new(dataset, &batch);
        let before = rows.snapshot(&model);
        sgd_step(&mut model, dataset, &batch, config, &mut log.counts).map_err(at_iteration)?;
        let delta = rows.squared_change(&model, &before);
        if !delta.is_finite() {
            return Err(Error::Diverged {
                iteration,
                user: batch[0],
                score: f64::NAN,
            });
        }
        log.records.push(IterationRecord {
            iteration,
            batch_loss: loss,
            param_delta: delta,
            seconds: started.elapsed().as_secs_f64(),
        });
        if delta < config.epsilon {
            log.stop_reason = StopReason::Converged;
            break;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::loss;
    use crate::synth::planted_low_rank;

    #[test]
    fn zero_budget_returns_initial_model() {
        let ds = planted_low_rank(20, 30, 3, 12, 1);
        let config = TrainConfig {
            max_iters: 0,
            ..TrainConfig::default()
        };
        let (model, log) = train(&ds, &config).unwrap();
        let init = init_model(20, 30, 10, &config.init_spec().unwrap()).unwrap();
        assert_eq!(model, init);
        assert!(log.records.is_empty());
        assert_eq!(log.stop_reason, StopReason::MaxIters);
    }

    #[test]
    fn huge_epsilon_stops_after_one_iteration() {
        let ds = planted_low_rank(20, 30, 3, 12, 1);
        let config = TrainConfig {
            epsilon: 1e300,
            ..TrainConfig::default()
        };
        let (_, log) = train(&ds, &config).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.stop_reason, StopReason::Converged);
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = planted_low_rank(20, 30, 3, 12, 2);
        let config = TrainConfig {
            epsilon: 0.0,
            max_iters: 5,
            ..TrainConfig::default()
        };
        let (a, la) = train(&ds, &config).unwrap();
        let (b, lb) = train(&ds, &config).unwrap();
        assert_eq!(a, b);
        let strip = |l: &TrainingLog| l.records.iter().map(|r| (r.batch_loss, r.param_delta)).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
    }

    #[test]
    fn rejects_incompatible_algorithm() {
        let config = TrainConfig {
            smoothing: Smoothing::sigmoid(),
            algorithm: Algorithm::FastRelu,
            ..TrainConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::InvalidConfig(_))));
        assert!(TrainConfig {
            algorithm: Algorithm::Generic,
            ..config
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(batch_size(100, 0.1), 10);
        assert_eq!(batch_size(5, 0.1), 1);
        assert_eq!(batch_size(7, 1.0), 7);
    }

    #[test]
    fn param_delta_matches_full_recomputation() {
        let ds = planted_low_rank(20, 30, 3, 12, 4);
        let config = TrainConfig {
            epsilon: 0.0,
            max_iters: 1,
            batch_fraction: 0.3,
            ..TrainConfig::default()
        };
        let init = init_model(20, 30, 10, &config.init_spec().unwrap()).unwrap();
        let (model, log) = train_from(init.clone(), &ds, &config).unwrap();
        let full: f64 = init
            .user_factors()
            .iter()
            .chain(init.item_factors())
            .zip(model.user_factors().iter().chain(model.item_factors()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((log.records[0].param_delta - full).abs() <= 1e-12 * full.max(1.0));
    }

    #[test]
    fn training_reduces_full_loss() {
        let ds = planted_low_rank(20, 30, 3, 15, 5);
        let config = TrainConfig {
            epsilon: 0.0,
            batch_fraction: 0.5,
            ..TrainConfig::default()
        };
        let users = ds.active_users();
        let init = init_model(20, 30, 10, &config.init_spec().unwrap()).unwrap();
        let before = loss(&init, &ds, &users, &config.objective()).unwrap();
        let (model, _) = train(&ds, &config).unwrap();
        let after = loss(&model, &ds, &users, &config.objective()).unwrap();
        assert!(after < before, "{after} >= {before}");
    }
}
