//! Smoothed wDCG@N objective and the generic quadratic-time trainer step.
//!
//! For a user `u` with observed items `I`, scores `f_i = <θ_u, θ_i>` and the
//! smoothed rank `R_i = Σ_{j≠i} h(f_j - f_i)`, the per-user loss is
//!
//! ```text
//! L_u = -Σ_i T(R_i) · w_i (2^y_i - 1) / ln(R_i + 2)
//! ```
//!
//! where `T(R) = h(N - R)` for the truncated objective and `T ≡ 1` otherwise.
//! The batch loss adds `λ‖θ_r‖²` once for every user and item row the batch
//! touches. Gradients here are the exact derivative of that expression,
//! evaluated with a direct double loop over item pairs (`O(k m̃²)` per user).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionDataset};
use crate::error::{Error, Result};
use crate::model::{dot, LatentFactorModel};

/// Scores beyond this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Default sigmoid scaling constant.
pub const DEFAULT_SIGMOID_SCALE: f64 = 7.0;

/// Surrogate for the indicator `1(f_i < f_j)`, applied to `Δ = f_j - f_i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Smoothing {
    /// `g(C x)` with `g` the logistic function and `C >= 1`.
    Sigmoid { scale: f64 },
    /// `max(0, x)`.
    #[default]
    Relu,
}

impl Smoothing {
    pub fn sigmoid() -> Self {
        Smoothing::Sigmoid {
            scale: DEFAULT_SIGMOID_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Smoothing::Sigmoid { scale } if !(scale >= 1.0 && scale.is_finite()) => Err(
                Error::InvalidConfig(format!("sigmoid scale must be >= 1, got {scale}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Smoothing::Sigmoid { scale } => logistic(scale * x),
            Smoothing::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Smoothing::Sigmoid { scale } => {
                let g = logistic(scale * x);
                scale * g * (1.0 - g)
            }
            Smoothing::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_relu(&self) -> bool {
        matches!(self, Smoothing::Relu)
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn smooth_value(spec: &Smoothing, x: f64) -> f64 {
    spec.value(x)
}

pub fn smooth_derivative(spec: &Smoothing, x: f64) -> f64 {
    spec.derivative(x)
}

/// Which relevance label enters the training gain `w (2^y - 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMode {
    /// `y` from the rating threshold; low-rated items have zero gain.
    #[default]
    Standard,
    /// `y = 1` for every observed item, so negative weights push items down.
    NegativeGain,
}

#[inline]
pub fn gain(x: &Interaction, mode: GainMode) -> f64 {
    let y = match mode {
        GainMode::Standard => x.y(),
        GainMode::NegativeGain => 1.0,
    };
    x.weight * (y.exp2() - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    /// Truncation cutoff `N`.
    pub top_n: usize,
    pub lambda: f64,
    pub smoothing: Smoothing,
    pub truncated: bool,
    #[serde(default)]
    pub gain_mode: GainMode,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            top_n: 20,
            lambda: 0.1,
            smoothing: Smoothing::Relu,
            truncated: true,
            gain_mode: GainMode::Standard,
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::InvalidConfig("top-N cutoff must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.smoothing.validate()
    }

    /// Loss contribution of one item and its derivative with respect to the
    /// smoothed rank, `(-T(R) G / ln(R+2), ∂/∂R)`.
    #[inline]
    pub fn rank_terms(&self, rank: f64, gain: f64) -> (f64, f64) {
        if gain == 0.0 {
            return (0.0, 0.0);
        }
        let shifted = rank + 2.0;
        let log = shifted.ln();
        let (trunc, dtrunc) = if self.truncated {
            let slack = self.top_n as f64 - rank;
            (self.smoothing.value(slack), self.smoothing.derivative(slack))
        } else {
            (1.0, 0.0)
        };
        let loss = -trunc * gain / log;
        let dloss = gain * (dtrunc / log + trunc / (shifted * log * log));
        (loss, dloss)
    }
}

/// Work counters used to witness the cost of a training pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Dot products `f_ui`.
    pub score_evals: u64,
    /// Smoothing-function evaluations on an item pair.
    pub pair_evals: u64,
    /// Length-`k` vector updates.
    pub vector_ops: u64,
    pub sort_comparisons: u64,
}

impl OpCounts {
    /// Total work excluding sort comparisons.
    pub fn work(&self) -> u64 {
        self.score_evals + self.pair_evals + self.vector_ops
    }

    pub fn add(&mut self, other: &OpCounts) {
        self.score_evals += other.score_evals;
        self.pair_evals += other.pair_evals;
        self.vector_ops += other.vector_ops;
        self.sort_comparisons += other.sort_comparisons;
    }
}

/// Integer ranks by the exact indicator; equal scores order by ascending item.
pub fn exact_ranks(scores: &[f64], items: &[usize]) -> Vec<usize> {
    assert_eq!(scores.len(), items.len());
    (0..scores.len())
        .map(|i| {
            (0..scores.len())
                .filter(|&j| {
                    scores[j] > scores[i] || (scores[j] == scores[i] && items[j] < items[i])
                })
                .count()
        })
        .collect()
}

/// `Σ_{j≠i} h(f_j - f_i)`.
pub fn smoothed_rank(spec: &Smoothing, scores: &[f64], i: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &f)| spec.value(f - scores[i]))
        .sum()
}

/// Unsmoothed wDCG@N of one user's list: `Σ_{rank<N} w (2^y - 1) / ln(rank + 2)`.
pub fn wdcg_at_n_exact(interactions: &[Interaction], scores: &[f64], top_n: usize) -> f64 {
    let items: Vec<usize> = interactions.iter().map(|x| x.item).collect();
    let ranks = exact_ranks(scores, &items);
    interactions
        .iter()
        .zip(ranks)
        .filter(|&(_, r)| r < top_n)
        .map(|(x, r)| gain(x, GainMode::Standard) / (r as f64 + 2.0).ln())
        .sum()
}

pub(crate) fn check_scores(u: usize, scores: &[f64]) -> Result<()> {
    for &f in scores {
        if !f.is_finite() || f.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iteration: 0,
                user: u,
                score: f,
            });
        }
    }
    Ok(())
}

pub(crate) fn user_scores(
    model: &LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    counts: &mut OpCounts,
) -> Result<Vec<f64>> {
    let theta_u = model.user_row(u);
    let scores: Vec<f64> = xs
        .iter()
        .map(|x| dot(theta_u, model.item_row(x.item)))
        .collect();
    counts.score_evals += xs.len() as u64;
    check_scores(u, &scores)?;
    Ok(scores)
}

/// Smoothed ranks by direct pairwise summation, plus per-item `(loss, ∂L/∂R)`.
fn quadratic_terms(
    spec: &ObjectiveSpec,
    xs: &[Interaction],
    scores: &[f64],
    counts: &mut OpCounts,
) -> (f64, Vec<f64>) {
    let m = xs.len();
    let mut loss = 0.0;
    let mut coef = Vec::with_capacity(m);
    for i in 0..m {
        let mut rank = 0.0;
        for j in 0..m {
            if j != i {
                rank += spec.smoothing.value(scores[j] - scores[i]);
            }
        }
        counts.pair_evals += m.saturating_sub(1) as u64;
        let (l, c) = spec.rank_terms(rank, gain(&xs[i], spec.gain_mode));
        loss += l;
        coef.push(c);
    }
    (loss, coef)
}

/// Data loss of one user, quadratic in the list length.
pub fn user_data_loss(model: &LatentFactorModel, u: usize, xs: &[Interaction], spec: &ObjectiveSpec) -> Result<f64> {
    let mut counts = OpCounts::default();
    let scores = user_scores(model, u, xs, &mut counts)?;
    Ok(quadratic_terms(spec, xs, &scores, &mut counts).0)
}

/// Data loss and its gradient with respect to `θ_u`, written into `grad`.
pub fn generic_user_gradient(
    model: &LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    grad: &mut [f64],
    counts: &mut OpCounts,
) -> Result<f64> {
    let scores = user_scores(model, u, xs, counts)?;
    let (loss, coef) = quadratic_terms(spec, xs, &scores, counts);
    grad.fill(0.0);
    for i in 0..xs.len() {
        let theta_i = model.item_row(xs[i].item);
        for j in 0..xs.len() {
            if j == i {
                continue;
            }
            counts.pair_evals += 1;
            let d = spec.smoothing.derivative(scores[j] - scores[i]);
            if d == 0.0 {
                continue;
            }
            let s = coef[i] * d;
            let theta_j = model.item_row(xs[j].item);
            for t in 0..grad.len() {
                grad[t] += s * (theta_j[t] - theta_i[t]);
            }
            counts.vector_ops += 1;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            user: u,
            score: f64::NAN,
        });
    }
    Ok(loss)
}

/// Data loss and its gradient with respect to each observed item row.
///
/// `grads` is `xs.len() × k`, row `p` belonging to `xs[p].item`.
pub fn generic_item_gradients(
    model: &LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    grads: &mut [f64],
    counts: &mut OpCounts,
) -> Result<f64> {
    let k = model.k();
    let scores = user_scores(model, u, xs, counts)?;
    let (loss, coef) = quadratic_terms(spec, xs, &scores, counts);
    let theta_u = model.user_row(u);
    grads.fill(0.0);
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            if j == i {
                continue;
            }
            counts.pair_evals += 1;
            let d = spec.smoothing.derivative(scores[j] - scores[i]);
            if d == 0.0 {
                continue;
            }
            // ∂Δ_ji/∂θ_i = -θ_u and ∂Δ_ji/∂θ_j = θ_u.
            let s = coef[i] * d;
            for t in 0..k {
                grads[i * k + t] -= s * theta_u[t];
            }
            for t in 0..k {
                grads[j * k + t] += s * theta_u[t];
            }
            counts.vector_ops += 2;
        }
    }
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            user: u,
            score: f64::NAN,
        });
    }
    Ok(loss)
}

/// Batch loss with gradients for every touched row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub user_grads: BTreeMap<usize, Vec<f64>>,
    pub item_grads: BTreeMap<usize, Vec<f64>>,
}

fn touched_rows(dataset: &InteractionDataset, users: &[usize]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let user_set: BTreeSet<usize> = users.iter().copied().collect();
    let item_set = user_set
        .iter()
        .flat_map(|&u| dataset.user(u).iter().map(|x| x.item))
        .collect();
    (user_set, item_set)
}

fn regularization(model: &LatentFactorModel, users: &BTreeSet<usize>, items: &BTreeSet<usize>) -> f64 {
    let users: f64 = users.iter().map(|&u| dot(model.user_row(u), model.user_row(u))).sum();
    let items: f64 = items.iter().map(|&i| dot(model.item_row(i), model.item_row(i))).sum();
    users + items
}

fn validate_batch(model: &LatentFactorModel, dataset: &InteractionDataset, users: &[usize]) -> Result<()> {
    if users.is_empty() {
        return Err(Error::Empty("batch has no users".into()));
    }
    if model.n_users() != dataset.n_users() || model.n_items() != dataset.n_items() {
        return Err(Error::ItemSpaceMismatch(format!(
            "model is {}x{} but dataset is {}x{}",
            model.n_users(),
            model.n_items(),
            dataset.n_users(),
            dataset.n_items()
        )));
    }
    for &u in users {
        if u >= dataset.n_users() {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                bound: dataset.n_users(),
            });
        }
    }
    Ok(())
}

/// Batch loss only: `Σ_u L_u + λ Σ_{touched rows} ‖θ_r‖²`.
pub fn loss(model: &LatentFactorModel, dataset: &InteractionDataset, users: &[usize], spec: &ObjectiveSpec) -> Result<f64> {
    validate_batch(model, dataset, users)?;
    let mut total = 0.0;
    for &u in users {
        total += user_data_loss(model, u, dataset.user(u), spec)?;
    }
    let (us, is) = touched_rows(dataset, users);
    Ok(total + spec.lambda * regularization(model, &us, &is))
}

/// Batch loss and its exact gradient, all evaluated at the current model.
pub fn loss_and_gradient(
    model: &LatentFactorModel,
    dataset: &InteractionDataset,
    users: &[usize],
    spec: &ObjectiveSpec,
) -> Result<LossGradient> {
    validate_batch(model, dataset, users)?;
    let k = model.k();
    let mut counts = OpCounts::default();
    let mut total = 0.0;
    let mut user_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut item_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut grad_u = vec![0.0; k];
    for &u in users {
        let xs = dataset.user(u);
        total += generic_user_gradient(model, u, xs, spec, &mut grad_u, &mut counts)?;
        let acc = user_grads.entry(u).or_insert_with(|| vec![0.0; k]);
        for (a, g) in acc.iter_mut().zip(&grad_u) {
            *a += g;
        }
        let mut grads = vec![0.0; xs.len() * k];
        generic_item_gradients(model, u, xs, spec, &mut grads, &mut counts)?;
        for (p, x) in xs.iter().enumerate() {
            let acc = item_grads.entry(x.item).or_insert_with(|| vec![0.0; k]);
            for (a, g) in acc.iter_mut().zip(&grads[p * k..(p + 1) * k]) {
                *a += g;
            }
        }
    }
    let (us, is) = touched_rows(dataset, users);
    total += spec.lambda * regularization(model, &us, &is);
    for (&u, g) in user_grads.iter_mut() {
        for (gt, th) in g.iter_mut().zip(model.user_row(u)) {
            *gt += 2.0 * spec.lambda * th;
        }
    }
    for (&i, g) in item_grads.iter_mut() {
        for (gt, th) in g.iter_mut().zip(model.item_row(i)) {
            *gt += 2.0 * spec.lambda * th;
        }
    }
    Ok(LossGradient {
        loss: total,
        user_grads,
        item_grads,
    })
}

/// One user's update in the order of the generic trainer: the user row first,
/// then all of the user's item rows from gradients taken at the updated user row.
pub fn sgd_user_step_generic(
    model: &mut LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    alpha: f64,
    counts: &mut OpCounts,
) -> Result<f64> {
    let k = model.k();
    let lambda2 = 2.0 * spec.lambda;
    let mut grad_u = vec![0.0; k];
    let loss = generic_user_gradient(model, u, xs, spec, &mut grad_u, counts)?;
    for (th, g) in model.user_row_mut(u).iter_mut().zip(&grad_u) {
        *th -= alpha * (g + lambda2 * *th);
    }
    counts.vector_ops += 1;

    let mut grads = vec![0.0; xs.len() * k];
    generic_item_gradients(model, u, xs, spec, &mut grads, counts)?;
    for (p, x) in xs.iter().enumerate() {
        for (th, g) in model.item_row_mut(x.item).iter_mut().zip(&grads[p * k..(p + 1) * k]) {
            *th -= alpha * (g + lambda2 * *th);
        }
    }
    counts.vector_ops += xs.len() as u64;
    Ok(loss)
}

/// Sequential SGD over the batch with the generic (any smoothing) gradient.
/// Returns the summed data loss seen at each user's step.
pub fn sgd_step_generic(
    model: &mut LatentFactorModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    spec: &ObjectiveSpec,
    alpha: f64,
    counts: &mut OpCounts,
) -> Result<f64> {
    validate_batch(model, dataset, batch)?;
    let mut total = 0.0;
    for &u in batch {
        total += sgd_user_step_generic(model, u, dataset.user(u), spec, alpha, counts)?;
    }
    Ok(total)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{init_model, InitSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_instance(
        seed: u64,
        n: usize,
        m: usize,
        k: usize,
    ) -> (LatentFactorModel, InteractionDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_user = (0..n)
            .map(|_| {
                let len = rng.gen_range(1..=m);
                let mut items: Vec<usize> = (0..m).collect();
                rand::seq::SliceRandom::shuffle(items.as_mut_slice(), &mut rng);
                items[..len]
                    .iter()
                    .map(|&i| {
                        let relevant = rng.gen_bool(0.6);
                        Interaction::new(i, if relevant { 1.0 } else { -1.0 }, relevant)
                    })
                    .collect()
            })
            .collect();
        let dataset = InteractionDataset::from_lists(m, per_user).unwrap();
        let model = init_model(n, m, k, &InitSpec { width: 1.0, seed }).unwrap();
        (model, dataset)
    }

    #[test]
    fn smoothing_values() {
        for scale in [1.0, 3.0, 7.0] {
            assert_eq!(Smoothing::Sigmoid { scale }.value(0.0), 0.5);
        }
        assert_eq!(Smoothing::Relu.value(-1.0), 0.0);
        assert_eq!(Smoothing::Relu.value(0.5), 0.5);
        assert!((Smoothing::sigmoid().value(1.0) - 0.9990889488055994).abs() < 1e-12);
        assert!(Smoothing::Sigmoid { scale: 0.5 }.validate().is_err());
        assert!(Smoothing::sigmoid().validate().is_ok());
    }

    #[test]
    fn smoothing_derivatives() {
        assert_eq!(Smoothing::sigmoid().derivative(0.0), 1.75);
        assert_eq!(Smoothing::Relu.derivative(2.0), 1.0);
        assert_eq!(Smoothing::Relu.derivative(-2.0), 0.0);
        assert_eq!(Smoothing::Relu.derivative(0.0), 0.0);
        let h = 1e-6;
        for spec in [Smoothing::sigmoid(), Smoothing::Relu, Smoothing::Sigmoid { scale: 2.5 }] {
            let fd = (spec.value(0.3 + h) - spec.value(0.3 - h)) / (2.0 * h);
            assert!((fd - spec.derivative(0.3)).abs() < 1e-6, "{spec:?}");
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(exact_ranks(&[0.9, 0.1, 0.5], &[0, 1, 2]), vec![0, 2, 1]);
        assert_eq!(exact_ranks(&[0.5, 0.5, 0.5], &[2, 0, 1]), vec![2, 0, 1]);
        let scores = [0.9, 0.5, 0.1];
        assert!((smoothed_rank(&Smoothing::Relu, &scores, 1) - 0.4).abs() < 1e-12);
        assert!((smoothed_rank(&Smoothing::Relu, &scores, 2) - 1.2).abs() < 1e-12);
        assert_eq!(smoothed_rank(&Smoothing::Relu, &scores, 0), 0.0);
        assert!((smoothed_rank(&Smoothing::sigmoid(), &scores, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_wdcg_examples() {
        let xs: Vec<Interaction> = (0..3).map(|i| Interaction::new(i, 1.0, true)).collect();
        let scores = [0.9, 0.5, 0.1];
        assert!((wdcg_at_n_exact(&xs, &scores, 2) - 2.352934267515801).abs() < 1e-12);
        let full = 1.0 / 2f64.ln() + 1.0 / 3f64.ln() + 1.0 / 4f64.ln();
        assert!((wdcg_at_n_exact(&xs, &scores, 3) - full).abs() < 1e-12);
        assert!((wdcg_at_n_exact(&xs, &scores, 100) - full).abs() < 1e-12);
        let zeros: Vec<Interaction> = (0..3).map(|i| Interaction::new(i, -1.0, false)).collect();
        assert_eq!(wdcg_at_n_exact(&zeros, &scores, 2), 0.0);
    }

    #[test]
    fn single_item_loss() {
        let mut model = LatentFactorModel::zeros(1, 1, 2);
        model.user_row_mut(0).copy_from_slice(&[0.5, 1.0]);
        model.item_row_mut(0).copy_from_slice(&[2.0, 0.25]);
        let ds = InteractionDataset::from_lists(1, vec![vec![Interaction::new(0, 1.0, true)]]).unwrap();
        let spec = ObjectiveSpec {
            top_n: 5,
            lambda: 0.3,
            smoothing: Smoothing::Relu,
            truncated: true,
            gain_mode: GainMode::Standard,
        };
        let reg = 0.3 * (0.25 + 1.0 + 4.0 + 0.0625);
        let expected = -5.0 / 2f64.ln() + reg;
        let lg = loss_and_gradient(&model, &ds, &[0], &spec).unwrap();
        assert!((lg.loss - expected).abs() < 1e-12);
        // No pairs: only the regularization gradient remains.
        assert_eq!(lg.user_grads[&0], vec![0.3, 0.6]);
        assert_eq!(lg.item_grads[&0], vec![1.2, 0.15]);
    }

    #[test]
    fn zero_gain_annihilates() {
        for smoothing in [Smoothing::Relu, Smoothing::sigmoid()] {
            for truncated in [true, false] {
                let (model, ds) = random_instance(3, 4, 6, 3);
                let per_user = ds
                    .per_user()
                    .iter()
                    .map(|l| l.iter().map(|x| Interaction::new(x.item, 2.5, false)).collect())
                    .collect();
                let ds = InteractionDataset::from_lists(6, per_user).unwrap();
                let spec = ObjectiveSpec {
                    top_n: 3,
                    lambda: 0.0,
                    smoothing,
                    truncated,
                    gain_mode: GainMode::Standard,
                };
                let lg = loss_and_gradient(&model, &ds, &[0, 1, 2, 3], &spec).unwrap();
                assert_eq!(lg.loss, 0.0);
                assert!(lg.user_grads.values().chain(lg.item_grads.values()).flatten().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn regularization_is_additive() {
        let (model, ds) = random_instance(8, 5, 8, 3);
        let users = [0, 2, 4];
        let base = ObjectiveSpec {
            lambda: 0.0,
            ..ObjectiveSpec::default()
        };
        let with = ObjectiveSpec { lambda: 0.7, ..base };
        let (us, is) = touched_rows(&ds, &users);
        let norms = regularization(&model, &us, &is);
        let diff = loss(&model, &ds, &users, &with).unwrap() - loss(&model, &ds, &users, &base).unwrap();
        assert!((diff - 0.7 * norms).abs() < 1e-12);
    }

    #[test]
    fn gain_scaling_scales_data_term() {
        let (model, ds) = random_instance(21, 4, 7, 3);
        let scaled = ds
            .per_user()
            .iter()
            .map(|l| l.iter().map(|x| Interaction { weight: x.weight * 3.0, ..*x }).collect())
            .collect();
        let scaled = InteractionDataset::from_lists(7, scaled).unwrap();
        let spec = ObjectiveSpec {
            lambda: 0.0,
            ..ObjectiveSpec::default()
        };
        let users = [0, 1, 2, 3];
        let a = loss(&model, &ds, &users, &spec).unwrap();
        let b = loss(&model, &scaled, &users, &spec).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, ds) = random_instance(2, 3, 5, 2);
        model.user_row_mut(1).fill(1e7);
        let err = loss(&model, &ds, &[0, 1], &ObjectiveSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { user: 1, .. }), "{err}");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut model, ds) = random_instance(4, 5, 8, 3);
        let before = model.clone();
        let mut counts = OpCounts::default();
        sgd_step_generic(&mut model, &ds, &[0, 1, 2], &ObjectiveSpec::default(), 0.0, &mut counts).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn untouched_rows_unchanged_without_regularization() {
        let (mut model, ds) = random_instance(6, 6, 10, 3);
        let before = model.clone();
        let spec = ObjectiveSpec {
            lambda: 0.0,
            ..ObjectiveSpec::default()
        };
        let batch = [1, 3];
        sgd_step_generic(&mut model, &ds, &batch, &spec, 0.05, &mut OpCounts::default()).unwrap();
        let touched_items: BTreeSet<usize> = batch.iter().flat_map(|&u| ds.user(u).iter().map(|x| x.item)).collect();
        for u in [0, 2, 4, 5] {
            assert_eq!(model.user_row(u), before.user_row(u));
        }
        for i in (0..10).filter(|i| !touched_items.contains(i)) {
            assert_eq!(model.item_row(i), before.item_row(i));
        }
    }

    /// Two users, k = 1, rectifier, N = 2, λ = 0, stepped by hand.
    #[test]
    fn two_user_hand_trace() {
        let alpha = 0.1;
        // ∂L/∂R for gain 1, truncated rectifier with N = 2 and R < 2.
        let c = |r: f64| 1.0 / (r + 2.0).ln() + (2.0 - r) / ((r + 2.0) * (r + 2.0).ln().powi(2));

        let mut model = LatentFactorModel::zeros(2, 3, 1);
        model.user_row_mut(0)[0] = 1.0;
        model.user_row_mut(1)[0] = 0.5;
        model.item_row_mut(0)[0] = 0.8;
        model.item_row_mut(1)[0] = 0.5;
        model.item_row_mut(2)[0] = 0.2;
        // user 0: items 0 (irrelevant) and 1 (relevant); user 1: items 1 and 2, both relevant.
        let ds = InteractionDataset::from_lists(
            3,
            vec![
                vec![Interaction::new(0, -1.0, false), Interaction::new(1, 1.0, true)],
                vec![Interaction::new(1, 1.0, true), Interaction::new(2, 1.0, true)],
            ],
        )
        .unwrap();
        let spec = ObjectiveSpec {
            top_n: 2,
            lambda: 0.0,
            smoothing: Smoothing::Relu,
            truncated: true,
            gain_mode: GainMode::Standard,
        };

        // User 0. Only item 1 has gain; R_1 = u (a - b), ∂R_1/∂u = a - b.
        let (a, b, c_item) = (0.8, 0.5, 0.2);
        let u0 = 1.0 - alpha * c(1.0 * (a - b)) * (a - b);
        // Items against the updated user row: ∂R_1/∂b = -u0, ∂R_1/∂a = u0.
        let coef = c(u0 * (a - b));
        let a1 = a - alpha * coef * u0;
        let b1 = b + alpha * coef * u0;

        // User 1: item 1 is on top (score 0.5 b1 > 0.5 c), item 2 has R = v (b1 - c).
        let v = 0.5;
        let v1 = v - alpha * c(v * (b1 - c_item)) * (b1 - c_item);
        let coef = c(v1 * (b1 - c_item));
        let b2 = b1 - alpha * coef * v1;
        let c1 = c_item + alpha * coef * v1;

        sgd_step_generic(&mut model, &ds, &[0, 1], &spec, alpha, &mut OpCounts::default()).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-14;
        assert!(close(model.user_row(0)[0], u0));
        assert!(close(model.user_row(1)[0], v1));
        assert!(close(model.item_row(0)[0], a1));
        assert!(close(model.item_row(1)[0], b2));
        assert!(close(model.item_row(2)[0], c1));
    }
}
