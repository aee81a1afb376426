//! Synthetic corpora with known structure, for tests, benchmarks and desk-scale runs.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};

use crate::dataset::{Interaction, InteractionDataset, RawRating};

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn affinity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Users rate `per_user` random items; the half of each user's items with the
/// highest planted rank-`rank` affinity are relevant (`w = +1`), the rest not.
pub fn planted_low_rank(
    n_users: usize,
    n_items: usize,
    rank: usize,
    per_user: usize,
    seed: u64,
) -> InteractionDataset {
    assert!(per_user <= n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = gaussian_rows(&mut rng, n_users, rank);
    let items = gaussian_rows(&mut rng, n_items, rank);
    let per_user = (0..n_users)
        .map(|u| {
            let chosen = index::sample(&mut rng, n_items, per_user).into_vec();
            let mut scored: Vec<(usize, f64)> = chosen
                .into_iter()
                .map(|i| (i, affinity(&users[u], &items[i])))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            let cut = scored.len() / 2;
            scored
                .into_iter()
                .enumerate()
                .map(|(pos, (i, _))| {
                    let relevant = pos < cut;
                    Interaction {
                        rating: if relevant { 5.0 } else { 2.0 },
                        ..Interaction::new(i, if relevant { 1.0 } else { -1.0 }, relevant)
                    }
                })
                .collect()
        })
        .collect();
    InteractionDataset::from_lists(n_items, per_user).expect("synthetic lists are valid")
}

/// Every user rates exactly `m_tilde` uniformly chosen items, half relevant on average.
pub fn fixed_length_users(n_users: usize, n_items: usize, m_tilde: usize, seed: u64) -> InteractionDataset {
    assert!(m_tilde <= n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_user = (0..n_users)
        .map(|_| {
            index::sample(&mut rng, n_items, m_tilde)
                .into_iter()
                .map(|i| {
                    let relevant = rng.gen_bool(0.5);
                    Interaction::new(i, if relevant { 1.0 } else { -1.0 }, relevant)
                })
                .collect()
        })
        .collect();
    InteractionDataset::from_lists(n_items, per_user).expect("synthetic lists are valid")
}

/// Shape and rating model of a MovieLens-like corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_ratings: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Dimension of the planted preference factors.
    pub rank: usize,
    /// Standard deviation of per-rating noise on the star scale.
    pub noise: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// 943 users, 1682 items, 100,000 ratings, at least 20 per user.
    pub fn movielens_100k(seed: u64) -> Self {
        CorpusSpec {
            n_users: 943,
            n_items: 1682,
            n_ratings: 100_000,
            min_per_user: 20,
            max_per_user: 737,
            rank: 5,
            noise: 0.6,
            seed,
        }
    }
}

/// Generates integer 1-5 star ratings with a heavy-tailed user activity
/// distribution, Zipf-like item popularity, and ratings driven by item and
/// user offsets plus a planted low-rank preference term.
pub fn movielens_like(spec: &CorpusSpec) -> Vec<RawRating> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_per_user = spec.max_per_user.min(spec.n_items);

    let activity = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let extra: Vec<f64> = (0..spec.n_users).map(|_| activity.sample(&mut rng)).collect();
    let budget = spec.n_ratings.saturating_sub(spec.n_users * spec.min_per_user) as f64;
    let scale = budget / extra.iter().sum::<f64>();
    let counts: Vec<usize> = extra
        .iter()
        .map(|e| (spec.min_per_user + (scale * e).round() as usize).min(max_per_user))
        .collect();

    // Popularity rank is a random permutation of items.
    let popularity_order = index::sample(&mut rng, spec.n_items, spec.n_items).into_vec();
    let mut popularity = vec![0.0; spec.n_items];
    for (rank, &item) in popularity_order.iter().enumerate() {
        popularity[item] = 1.0 / (rank as f64 + 10.0).powf(0.9);
    }

    let user_factors = gaussian_rows(&mut rng, spec.n_users, spec.rank);
    let item_factors = gaussian_rows(&mut rng, spec.n_items, spec.rank);
    let item_offset = Normal::new(0.0, 0.5).expect("valid normal");
    let user_offset = Normal::new(0.0, 0.35).expect("valid normal");
    let noise = Normal::new(0.0, spec.noise).expect("valid normal");
    let item_bias: Vec<f64> = (0..spec.n_items).map(|_| item_offset.sample(&mut rng)).collect();
    let norm = 0.45 / (spec.rank as f64).sqrt();

    let mut ratings = Vec::with_capacity(counts.iter().sum());
    let mut timestamp = 874_724_710i64;
    for (u, &count) in counts.iter().enumerate() {
        let user_bias = user_offset.sample(&mut rng);
        let items = index::sample_weighted(&mut rng, spec.n_items, |i| popularity[i], count)
            .expect("positive popularity weights")
            .into_vec();
        for i in items {
            let x = 3.55
                + user_bias
                + item_bias[i]
                + norm * affinity(&user_factors[u], &item_factors[i])
                + noise.sample(&mut rng);
            let stars = x.round().clamp(1.0, 5.0);
            timestamp += rng.gen_range(1..500);
            ratings.push(RawRating {
                user: (u + 1).to_string(),
                item: (i + 1).to_string(),
                rating: stars,
                timestamp: Some(timestamp),
                line: 0,
            });
        }
    }
    ratings
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn planted_halves() {
        let ds = planted_low_rank(20, 30, 3, 12, 1);
        assert_eq!(ds.n_users(), 20);
        for list in ds.per_user() {
            assert_eq!(list.len(), 12);
            assert_eq!(list.iter().filter(|x| x.relevant).count(), 6);
        }
    }

    #[test]
    fn fixed_lengths() {
        let ds = fixed_length_users(10, 100, 37, 3);
        assert!(ds.per_user().iter().all(|l| l.len() == 37));
    }

    #[test]
    fn movielens_shape() {
        let spec = CorpusSpec::movielens_100k(7);
        let ratings = movielens_like(&spec);
        let total = ratings.len();
        assert!((90_000..=110_000).contains(&total), "{total}");
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        let mut pairs = HashSet::new();
        for r in &ratings {
            *per_user.entry(&r.user).or_default() += 1;
            assert!(pairs.insert((&r.user, &r.item)));
            assert!((1.0..=5.0).contains(&r.rating) && r.rating.fract() == 0.0);
        }
        assert_eq!(per_user.len(), 943);
        assert!(per_user.values().all(|&c| c >= 20));
        let relevant = ratings.iter().filter(|r| r.rating >= 4.0).count() as f64 / total as f64;
        assert!((0.35..0.7).contains(&relevant), "{relevant}");
        assert_eq!(movielens_like(&spec), ratings);
    }
}
