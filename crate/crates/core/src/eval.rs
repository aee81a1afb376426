//! NDCG@N over each user's rated held-out items, and the repeated-split protocol.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_half, split_half_lenient, InteractionDataset};
use crate::error::{Error, Result};
use crate::model::LatentFactorModel;
use crate::objective::Smoothing;
use crate::train::{derive_seed, train, Algorithm, TrainConfig};

pub const DEFAULT_CUTOFFS: [usize; 5] = [1, 3, 5, 10, 20];

/// A held-out item with its predicted score and relevance label `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub item: usize,
    pub score: f64,
    pub y: f64,
}

fn gain(y: f64) -> f64 {
    y.exp2() - 1.0
}

/// Descending score, ties by ascending item index.
fn by_score(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.item.cmp(&b.item))
}

/// `Σ_{r<n} gains[r] / log_base(r + 2)` over gains already in rank order.
pub fn dcg(gains: impl IntoIterator<Item = f64>, n: usize, base: f64) -> f64 {
    let log_base = base.ln();
    gains
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(r, g)| g * log_base / (r as f64 + 2.0).ln())
        .sum()
}

/// NDCG@N with discount `log_base(rank + 2)`; `None` when the ideal DCG is zero.
pub fn ndcg_at_n_base(items: &[ScoredItem], n: usize, base: f64) -> Option<f64> {
    let mut ideal: Vec<f64> = items.iter().map(|x| gain(x.y)).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal, n, base);
    if idcg == 0.0 {
        return None;
    }
    let mut ranked = items.to_vec();
    ranked.sort_by(by_score);
    Some(dcg(ranked.iter().map(|x| gain(x.y)), n, base) / idcg)
}

pub fn ndcg_at_n(items: &[ScoredItem], n: usize) -> Option<f64> {
    ndcg_at_n_base(items, n, std::f64::consts::E)
}

/// Metrics of one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub seed: u64,
    /// Mean NDCG over included users, one entry per cutoff.
    pub ndcg: Vec<f64>,
    pub n_users: usize,
    /// Users without any relevant held-out item (or none at all).
    pub n_excluded: usize,
    /// Learning rate the split was trained with, when produced by an experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cutoffs: Vec<usize>,
    pub splits: Vec<SplitMetrics>,
    /// Mean over splits, per cutoff.
    pub mean: Vec<f64>,
    /// Sample standard deviation over splits; `None` with a single split.
    pub stddev: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_splits(cutoffs: Vec<usize>, splits: Vec<SplitMetrics>) -> Self {
        let count = splits.len() as f64;
        let mean: Vec<f64> = (0..cutoffs.len())
            .map(|c| splits.iter().map(|s| s.ndcg[c]).sum::<f64>() / count)
            .collect();
        let stddev = (0..cutoffs.len())
            .map(|c| {
                (splits.len() > 1).then(|| {
                    let ss: f64 = splits.iter().map(|s| (s.ndcg[c] - mean[c]).powi(2)).sum();
                    (ss / (count - 1.0)).sqrt()
                })
            })
            .collect();
        MetricsReport {
            cutoffs,
            splits,
            mean,
            stddev,
        }
    }

    pub fn total_users(&self) -> usize {
        self.splits.iter().map(|s| s.n_users).sum()
    }

    pub fn total_excluded(&self) -> usize {
        self.splits.iter().map(|s| s.n_excluded).sum()
    }

    /// One row per cutoff: `cutoff, mean, stddev, n_users, n_excluded`.
    ///
    /// User counts are summed over splits.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cutoff\tmean\tstddev\tn_users\tn_excluded\n");
        for (c, cutoff) in self.cutoffs.iter().enumerate() {
            let sd = self.stddev[c].map(|s| format!("{s:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{cutoff}\t{:.6}\t{sd}\t{}\t{}",
                self.mean[c],
                self.total_users(),
                self.total_excluded()
            );
        }
        out
    }
}

fn user_ndcg(model: &LatentFactorModel, test: &InteractionDataset, u: usize, cutoffs: &[usize]) -> Option<Vec<f64>> {
    let items: Vec<ScoredItem> = test
        .user(u)
        .iter()
        .map(|x| ScoredItem {
            item: x.item,
            score: model.score(u, x.item),
            y: x.y(),
        })
        .collect();
    cutoffs.iter().map(|&n| ndcg_at_n(&items, n)).collect()
}

/// Mean NDCG at each cutoff over users with at least one relevant test item.
pub fn evaluate_split(model: &LatentFactorModel, test: &InteractionDataset, cutoffs: &[usize], seed: u64) -> Result<SplitMetrics> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::InvalidConfig("cutoffs must be non-empty and >= 1".into()));
    }
    if model.n_users() != test.n_users() || model.n_items() != test.n_items() {
        return Err(Error::ItemSpaceMismatch(format!(
            "model is {}x{} but test set is {}x{}",
            model.n_users(),
            model.n_items(),
            test.n_users(),
            test.n_items()
        )));
    }
    let per_user: Vec<Option<Vec<f64>>> = (0..test.n_users())
        .into_par_iter()
        .map(|u| user_ndcg(model, test, u, cutoffs))
        .collect();
    let mut sums = vec![0.0; cutoffs.len()];
    let mut included = 0;
    for values in per_user.iter().flatten() {
        included += 1;
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
    }
    if included == 0 {
        return Err(Error::Empty("no user has a relevant test item".into()));
    }
    Ok(SplitMetrics {
        seed,
        ndcg: sums.into_iter().map(|s| s / included as f64).collect(),
        n_users: included,
        n_excluded: test.n_users() - included,
        learning_rate: None,
    })
}

pub fn evaluate_model(model: &LatentFactorModel, test: &InteractionDataset, cutoffs: &[usize]) -> Result<MetricsReport> {
    let split = evaluate_split(model, test, cutoffs, 0)?;
    Ok(MetricsReport::from_splits(cutoffs.to_vec(), vec![split]))
}

/// Seed of the `repeat`-th split for a base seed.
pub fn split_seed(base: u64, repeat: usize) -> u64 {
    derive_seed(base, 100 + repeat as u64)
}

/// Training seed of the `repeat`-th run for a base seed.
pub fn run_seed(base: u64, repeat: usize) -> u64 {
    derive_seed(base, 200 + repeat as u64)
}

/// Seed of the validation split carved from the `repeat`-th training half.
pub fn validation_seed(base: u64, repeat: usize) -> u64 {
    derive_seed(base, 300 + repeat as u64)
}

/// Learning rates tried when selecting per split.
pub const DEFAULT_LR_GRID: [f64; 9] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0];

/// Repeated random-split evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub repeats: usize,
    pub cutoffs: Vec<usize>,
    /// Candidate learning rates. When non-empty, each split picks the rate with
    /// the best mean validation NDCG over `cutoffs`, measured on a half split of
    /// its training half, then retrains on the whole training half. When empty,
    /// the configured rate is used as is.
    pub lr_grid: Vec<f64>,
}

impl Protocol {
    pub fn fixed(repeats: usize, cutoffs: &[usize]) -> Self {
        Protocol {
            repeats,
            cutoffs: cutoffs.to_vec(),
            lr_grid: Vec::new(),
        }
    }

    pub fn tuned(repeats: usize, cutoffs: &[usize]) -> Self {
        Protocol {
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            ..Self::fixed(repeats, cutoffs)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig(format!("learning rate grid entry {lr} is not > 0")));
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Picks the learning rate from `grid` with the best mean validation NDCG.
///
/// Candidates that diverge are skipped; ties keep the earlier grid entry.
pub fn select_learning_rate(
    train_half: &InteractionDataset,
    config: &TrainConfig,
    grid: &[f64],
    cutoffs: &[usize],
    seed: u64,
) -> Result<f64> {
    let inner = split_half_lenient(train_half, seed);
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let candidate = TrainConfig {
            learning_rate: lr,
            ..*config
        };
        let model = match train(&inner.train, &candidate) {
            Ok((model, _)) => model,
            Err(Error::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let score = mean(&evaluate_split(&model, &inner.test, cutoffs, seed)?.ndcg);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((lr, score));
        }
    }
    best.map(|(lr, _)| lr)
        .ok_or_else(|| Error::InvalidConfig("every learning rate in the grid diverged".into()))
}

/// Split, train and evaluate `protocol.repeats` times on the same filtered user set.
pub fn run_experiment(dataset: &InteractionDataset, config: &TrainConfig, protocol: &Protocol) -> Result<MetricsReport> {
    protocol.validate()?;
    let cutoffs = &protocol.cutoffs;
    let mut splits = Vec::with_capacity(protocol.repeats);
    for r in 0..protocol.repeats {
        let seed = split_seed(config.seed, r);
        let pair = split_half(dataset, seed)?;
        let mut run = TrainConfig {
            seed: run_seed(config.seed, r),
            ..*config
        };
        if !protocol.lr_grid.is_empty() {
            run.learning_rate =
                select_learning_rate(&pair.train, &run, &protocol.lr_grid, cutoffs, validation_seed(config.seed, r))?;
        }
        let (model, _) = train(&pair.train, &run)?;
        let mut metrics = evaluate_split(&model, &pair.test, cutoffs, seed)?;
        metrics.learning_rate = Some(run.learning_rate);
        splits.push(metrics);
    }
    Ok(MetricsReport::from_splits(cutoffs.to_vec(), splits))
}

/// One row of the truncation × smoothing comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    TopNRelu,
    NonTopNRelu,
    TopNSigmoid,
    NonTopNSigmoid,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::TopNRelu,
        Variant::NonTopNRelu,
        Variant::TopNSigmoid,
        Variant::NonTopNSigmoid,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::TopNRelu => "Top-N-Rank.ReLU",
            Variant::NonTopNRelu => "non-Top-N.ReLU",
            Variant::TopNSigmoid => "Top-N-Rank.sgm",
            Variant::NonTopNSigmoid => "non-Top-N.sgm",
        }
    }

    /// `base` with this variant's smoothing, truncation and algorithm. The
    /// sigmoid scale is taken from `base` when it is a sigmoid config.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let sigmoid = match base.smoothing {
            s @ Smoothing::Sigmoid { .. } => s,
            Smoothing::Relu => Smoothing::sigmoid(),
        };
        let (smoothing, truncated) = match self {
            Variant::TopNRelu => (Smoothing::Relu, true),
            Variant::NonTopNRelu => (Smoothing::Relu, false),
            Variant::TopNSigmoid => (sigmoid, true),
            Variant::NonTopNSigmoid => (sigmoid, false),
        };
        TrainConfig {
            smoothing,
            truncated,
            algorithm: Algorithm::for_smoothing(&smoothing),
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cutoffs: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.variant == variant.name()).map(|r| &r.report)
    }

    /// Wide table: one row per variant, mean and stddev columns per cutoff.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant");
        for c in &self.cutoffs {
            let _ = write!(out, "\tNDCG@{c}\tsd@{c}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.variant);
            for (c, mean) in row.report.mean.iter().enumerate() {
                let sd = row.report.stddev[c].map(|s| format!("{s:.4}")).unwrap_or_default();
                let _ = write!(out, "\t{mean:.4}\t{sd}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs all four variants over the same splits and training seeds.
pub fn run_ablation(dataset: &InteractionDataset, base: &TrainConfig, protocol: &Protocol) -> Result<AblationReport> {
    let rows = Variant::ALL
        .iter()
        .map(|v| {
            Ok(AblationRow {
                variant: v.name().to_string(),
                report: run_experiment(dataset, &v.apply(base), protocol)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        cutoffs: protocol.cutoffs.clone(),
        rows,
    })
}
