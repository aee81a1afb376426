//! Linear-time training pass for the rectifier surrogate.
//!
//! With `h = relu`, sorting a user's items by descending score makes every
//! difference `f_j - f_i` for an earlier item `j` non-negative and every later
//! one non-positive. Smoothed ranks and the pairwise sums in the gradient then
//! collapse into running prefix sums over the sorted list:
//!
//! ```text
//! R_p        = Sf_s - s · f_p
//! Σ_j h' ∂Δ/∂θ_u = Sθ_s - s · θ_p
//! ```
//!
//! where `s` is the number of items with a strictly larger score (the start of
//! `p`'s tie group). Items tied with `p` contribute nothing because
//! `relu'(0) = 0`. The item gradient also needs the part of other items' ranks
//! that depends on `θ_p`, which is a suffix sum of rank coefficients over the
//! strictly lower-scored items.

use std::cmp::Ordering;

use crate::dataset::{Interaction, InteractionDataset};
use crate::error::{Error, Result};
use crate::model::{dot, LatentFactorModel};
use crate::objective::{check_scores, gain, ObjectiveSpec, OpCounts};

/// A user's items in descending score order with prefix sums.
#[derive(Debug, Clone)]
pub struct SortedUserView {
    /// Positions into the user's interaction list, best score first.
    pub order: Vec<usize>,
    /// Scores in sorted order.
    pub scores: Vec<f64>,
    /// For each sorted position, the first position of its tie group.
    pub group_start: Vec<usize>,
    /// `prefix_scores[p] = Σ_{q<p} scores[q]`, length `len + 1`.
    pub prefix_scores: Vec<f64>,
    /// `prefix_factors[p*k..(p+1)*k] = Σ_{q<p} θ_{order[q]}`, empty unless requested.
    pub prefix_factors: Vec<f64>,
    k: usize,
}

impl SortedUserView {
    pub fn new(
        model: &LatentFactorModel,
        u: usize,
        xs: &[Interaction],
        with_factors: bool,
        counts: &mut OpCounts,
    ) -> Result<Self> {
        Self::with_hint(model, u, xs, with_factors, None, counts)
    }

    /// Builds the view starting the sort from `hint`, a previous order of the
    /// same list. The result does not depend on the hint; a nearly sorted
    /// hint only makes the sort cheaper.
    pub fn with_hint(
        model: &LatentFactorModel,
        u: usize,
        xs: &[Interaction],
        with_factors: bool,
        hint: Option<&[usize]>,
        counts: &mut OpCounts,
    ) -> Result<Self> {
        let k = model.k();
        let theta_u = model.user_row(u);
        let raw: Vec<f64> = xs.iter().map(|x| dot(theta_u, model.item_row(x.item))).collect();
        counts.score_evals += xs.len() as u64;
        check_scores(u, &raw)?;

        // (score, item, position); items are unique within a list, so this is a total order.
        let mut keyed: Vec<(f64, usize, usize)> = match hint {
            Some(h) if h.len() == xs.len() => h.iter().map(|&p| (raw[p], xs[p].item, p)).collect(),
            _ => (0..xs.len()).map(|p| (raw[p], xs[p].item, p)).collect(),
        };
        let mut comparisons = 0u64;
        let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if hint.is_some() {
            // Adaptive stable sort: near-linear on an almost sorted hint.
            keyed.sort_by(|a, b| {
                comparisons += 1;
                cmp(a, b)
            });
        } else {
            keyed.sort_unstable_by(|a, b| {
                comparisons += 1;
                cmp(a, b)
            });
        }
        counts.sort_comparisons += comparisons;
        let order: Vec<usize> = keyed.iter().map(|e| e.2).collect();

        let scores: Vec<f64> = keyed.iter().map(|e| e.0).collect();
        let mut group_start = Vec::with_capacity(scores.len());
        let mut prefix_scores = Vec::with_capacity(scores.len() + 1);
        prefix_scores.push(0.0);
        for (p, &f) in scores.iter().enumerate() {
            let start = if p > 0 && scores[p - 1] == f {
                group_start[p - 1]
            } else {
                p
            };
            group_start.push(start);
            prefix_scores.push(prefix_scores[p] + f);
        }

        let mut prefix_factors = Vec::new();
        if with_factors {
            prefix_factors = vec![0.0; (scores.len() + 1) * k];
            for (p, &pos) in order.iter().enumerate() {
                let row = model.item_row(xs[pos].item);
                let (done, rest) = prefix_factors.split_at_mut((p + 1) * k);
                let prev = &done[p * k..];
                for t in 0..k {
                    rest[t] = prev[t] + row[t];
                }
            }
            counts.vector_ops += scores.len() as u64;
        }

        Ok(SortedUserView {
            order,
            scores,
            group_start,
            prefix_scores,
            prefix_factors,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `Σ_{q<p} θ_{order[q]}`; requires a view built with factors.
    pub fn prefix_factor(&self, p: usize) -> &[f64] {
        &self.prefix_factors[p * self.k..(p + 1) * self.k]
    }
}

/// Rectifier smoothed ranks, in sorted order, each in constant time.
pub fn fast_smoothed_ranks(view: &SortedUserView) -> Vec<f64> {
    (0..view.len())
        .map(|p| {
            let s = view.group_start[p];
            view.prefix_scores[s] - s as f64 * view.scores[p]
        })
        .collect()
}

fn require_relu(spec: &ObjectiveSpec) -> Result<()> {
    if !spec.smoothing.is_relu() {
        return Err(Error::InvalidConfig(
            "the fast trainer requires rectifier smoothing".into(),
        ));
    }
    Ok(())
}

/// Sums the per-item loss terms and returns `∂L/∂R` in sorted order.
fn rank_coefficients(spec: &ObjectiveSpec, view: &SortedUserView, xs: &[Interaction], ranks: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let coef = view
        .order
        .iter()
        .zip(ranks)
        .map(|(&pos, &r)| {
            let (l, c) = spec.rank_terms(r, gain(&xs[pos], spec.gain_mode));
            loss += l;
            c
        })
        .collect();
    (loss, coef)
}

/// Data loss of one user in `O(k m̃ + m̃ log m̃)`.
pub fn user_data_loss_fast(model: &LatentFactorModel, u: usize, xs: &[Interaction], spec: &ObjectiveSpec) -> Result<f64> {
    require_relu(spec)?;
    let view = SortedUserView::new(model, u, xs, false, &mut OpCounts::default())?;
    let ranks = fast_smoothed_ranks(&view);
    Ok(rank_coefficients(spec, &view, xs, &ranks).0)
}

/// Data loss and the data gradient for `θ_u`, written into `grad`.
pub fn fast_user_gradient(
    model: &LatentFactorModel,
    view: &SortedUserView,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    grad: &mut [f64],
    counts: &mut OpCounts,
) -> Result<f64> {
    require_relu(spec)?;
    let k = model.k();
    let ranks = fast_smoothed_ranks(view);
    let (loss, coef) = rank_coefficients(spec, view, xs, &ranks);
    grad.fill(0.0);
    for p in 0..view.len() {
        let s = view.group_start[p];
        if s == 0 {
            // Top tie group: no strictly higher item, so rank and inner sum are zero.
            debug_assert_eq!(ranks[p], 0.0);
            continue;
        }
        let c = coef[p];
        if c == 0.0 {
            continue;
        }
        let sum = view.prefix_factor(s);
        let row = model.item_row(xs[view.order[p]].item);
        let sf = s as f64;
        for t in 0..k {
            grad[t] += c * (sum[t] - sf * row[t]);
        }
        counts.vector_ops += 1;
    }
    Ok(loss)
}

/// Updates every item row of user `u` against the current user row.
///
/// Item at sorted position `p` with tie group `[s, e)` gets the data gradient
/// `(Σ_{q≥e} c_q - s · c_p) θ_u`: the first term from lower-ranked items whose
/// rank it raises, the second from its own rank.
pub fn fast_item_updates(
    model: &mut LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    alpha: f64,
    counts: &mut OpCounts,
) -> Result<f64> {
    item_updates(model, u, xs, spec, alpha, None, counts)
}

fn item_updates(
    model: &mut LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    alpha: f64,
    hint: Option<&[usize]>,
    counts: &mut OpCounts,
) -> Result<f64> {
    require_relu(spec)?;
    let k = model.k();
    let view = SortedUserView::with_hint(model, u, xs, false, hint, counts)?;
    let ranks = fast_smoothed_ranks(&view);
    let (loss, coef) = rank_coefficients(spec, &view, xs, &ranks);

    // below[p] = Σ of coefficients strictly after p's tie group.
    let len = view.len();
    let mut below = vec![0.0; len];
    let mut running = 0.0;
    let mut p = len;
    while p > 0 {
        let start = view.group_start[p - 1];
        below[start..p].fill(running);
        running += coef[start..p].iter().sum::<f64>();
        p = start;
    }

    let theta_u = model.user_row(u).to_vec();
    let lambda2 = 2.0 * spec.lambda;
    for p in 0..len {
        let scale = below[p] - view.group_start[p] as f64 * coef[p];
        let row = model.item_row_mut(xs[view.order[p]].item);
        for t in 0..k {
            row[t] -= alpha * (scale * theta_u[t] + lambda2 * row[t]);
        }
    }
    counts.vector_ops += len as u64;
    Ok(loss)
}

/// One user's step: gradient and update of `θ_u`, then re-sort and update items.
pub fn sgd_user_step_fast(
    model: &mut LatentFactorModel,
    u: usize,
    xs: &[Interaction],
    spec: &ObjectiveSpec,
    alpha: f64,
    counts: &mut OpCounts,
) -> Result<f64> {
    let mut grad = vec![0.0; model.k()];
    let view = SortedUserView::new(model, u, xs, true, counts)?;
    let loss = fast_user_gradient(model, &view, xs, spec, &mut grad, counts)?;
    let lambda2 = 2.0 * spec.lambda;
    for (th, g) in model.user_row_mut(u).iter_mut().zip(&grad) {
        *th -= alpha * (g + lambda2 * *th);
    }
    counts.vector_ops += 1;
    item_updates(model, u, xs, spec, alpha, Some(&view.order), counts)?;
    Ok(loss)
}

/// Sequential SGD over the batch using the sorted rectifier pass.
pub fn sgd_step_fast(
    model: &mut LatentFactorModel,
    dataset: &InteractionDataset,
    batch: &[usize],
    spec: &ObjectiveSpec,
    alpha: f64,
    counts: &mut OpCounts,
) -> Result<f64> {
    require_relu(spec)?;
    if batch.is_empty() {
        return Err(Error::Empty("batch has no users".into()));
    }
    let mut total = 0.0;
    for &u in batch {
        total += sgd_user_step_fast(model, u, dataset.user(u), spec, alpha, counts)?;
    }
    Ok(total)
}
