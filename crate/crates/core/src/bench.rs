//! Cost of one SGD pass as a function of the per-user list length `m̃`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, InitSpec};
use crate::objective::OpCounts;
use crate::synth::fixed_length_users;
use crate::train::{sgd_step, Algorithm, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub m_tilde: usize,
    pub algorithm: Algorithm,
    /// Fastest wall-clock seconds of one pass over all users. Interference
    /// from other processes only adds time, so this tracks intrinsic cost.
    pub min_seconds: f64,
    /// Median wall-clock seconds of one pass over all users.
    pub median_seconds: f64,
    /// Operation counts of one pass (identical across trials).
    pub counts: OpCounts,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[mid - 1] + xs[mid]) / 2.0
    } else {
        xs[mid]
    }
}

/// Times one full-batch pass of each algorithm on `n_users` users with exactly
/// `m̃` interactions each, over a catalog twice the largest `m̃`.
///
/// Both algorithms start from the same model and see the same data; the
/// rectifier objective is used so both are applicable. After one warm-up pass
/// per cell, trials visit every `(m̃, algorithm)` cell in turn so slow drift
/// in machine load affects all cells alike.
pub fn benchmark_scaling(m_values: &[usize], n_users: usize, k: usize, trials: usize, seed: u64) -> Result<Vec<ScalingRow>> {
    if m_values.is_empty() || trials == 0 || n_users == 0 {
        return Err(Error::InvalidConfig("benchmark needs m values, users and trials".into()));
    }
    let n_items = 2 * m_values.iter().copied().max().unwrap_or(1);
    let batch: Vec<usize> = (0..n_users).collect();
    let start = init_model(n_users, n_items, k, &InitSpec::for_rank(k, seed)?)?;
    let datasets: Vec<_> = m_values
        .iter()
        .map(|&m_tilde| fixed_length_users(n_users, n_items, m_tilde, seed))
        .collect();
    let cells: Vec<(usize, Algorithm)> = (0..m_values.len())
        .flat_map(|c| [(c, Algorithm::Generic), (c, Algorithm::FastRelu)])
        .collect();
    let config = |algorithm| TrainConfig {
        k,
        algorithm,
        // Small steps keep every trial's scores bounded.
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let run = |c: usize, algorithm: Algorithm| -> Result<(f64, OpCounts)> {
        let mut model = start.clone();
        let mut counts = OpCounts::default();
        let t = Instant::now();
        sgd_step(&mut model, &datasets[c], &batch, &config(algorithm), &mut counts)?;
        Ok((t.elapsed().as_secs_f64(), counts))
    };

    let mut counts = Vec::with_capacity(cells.len());
    for &(c, algorithm) in &cells {
        counts.push(run(c, algorithm)?.1);
    }
    let mut times = vec![Vec::with_capacity(trials); cells.len()];
    for _ in 0..trials {
        for (cell, &(c, algorithm)) in cells.iter().enumerate() {
            times[cell].push(run(c, algorithm)?.0);
        }
    }
    Ok(cells
        .iter()
        .zip(times)
        .zip(counts)
        .map(|((&(c, algorithm), times), counts)| ScalingRow {
            m_tilde: m_values[c],
            algorithm,
            min_seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
            median_seconds: median(times),
            counts,
        })
        .collect())
}

/// Ratios of consecutive values of `metric` per algorithm, in `m̃` order.
pub fn doubling_ratios(rows: &[ScalingRow], algorithm: Algorithm, metric: impl Fn(&ScalingRow) -> f64) -> Vec<f64> {
    let series: Vec<f64> = rows.iter().filter(|r| r.algorithm == algorithm).map(metric).collect();
    series.windows(2).map(|w| w[1] / w[0]).collect()
}

pub fn to_tsv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("m_tilde\talgorithm\tmin_seconds\tmedian_seconds\tscore_evals\tpair_evals\tvector_ops\tsort_comparisons\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6e}\t{:.6e}\t{}\t{}\t{}\t{}\n",
            r.m_tilde,
            r.algorithm,
            r.min_seconds,
            r.median_seconds,
            r.counts.score_evals,
            r.counts.pair_evals,
            r.counts.vector_ops,
            r.counts.sort_comparisons
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_item_lists_cost_about_the_same() {
        let rows = benchmark_scaling(&[1], 20, 4, 1, 3).unwrap();
        let (g, f) = (rows[0].counts.work(), rows[1].counts.work());
        assert!(g.max(f) <= 3 * g.min(f).max(1), "generic {g}, fast {f}");
    }

    #[test]
    fn generic_grows_quadratically_fast_linearly() {
        let rows = benchmark_scaling(&[50, 100, 200], 10, 4, 1, 1).unwrap();
        for r in doubling_ratios(&rows, Algorithm::Generic, |r| r.counts.work() as f64) {
            assert!(r > 3.0, "{r}");
        }
        for r in doubling_ratios(&rows, Algorithm::FastRelu, |r| r.counts.work() as f64) {
            assert!(r < 2.5, "{r}");
        }
    }

    #[test]
    fn tsv_has_one_row_per_measurement() {
        let rows = benchmark_scaling(&[5, 10], 3, 2, 2, 0).unwrap();
        assert_eq!(to_tsv(&rows).lines().count(), 5);
    }
}
