//! List-wise top-N ranking over latent factor models.
//!
//! Users and items share a `k`-dimensional factor space and are scored by
//! inner product. Training minimizes a smoothed, top-N truncated negative
//! DCG per user with mini-batch SGD, either by a pairwise gradient for any
//! smoothing function or by a sorted prefix-sum pass for the rectifier.

pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fast;
pub mod model;
pub mod objective;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{IdMap, Interaction, InteractionDataset, RawRating};
pub use error::{Error, Result};
pub use eval::{evaluate_model, ndcg_at_n, MetricsReport};
pub use model::{init_model, InitSpec, LatentFactorModel};
pub use objective::{ObjectiveSpec, OpCounts, Smoothing};
pub use train::{train, Algorithm, TrainConfig, TrainingLog};
