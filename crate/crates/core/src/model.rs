//! Latent factor model: dense user and item factor matrices, row-major.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Uniform initialization width that keeps initial scores within one unit of their mean.
///
/// With factors drawn from `U(0, b)` a score is a sum of `k` products with
/// mean `k b^2 / 4` and variance `7 k b^4 / 144`. Setting three standard
/// deviations to one gives `b = 2 / (7k)^(1/4)`.
pub fn relu_init_width(k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("factor dimension k must be >= 1".into()));
    }
    Ok(2.0 / (7.0 * k as f64).powf(0.25))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    /// Upper bound of the uniform distribution `U(0, width)`.
    pub width: f64,
    pub seed: u64,
}

impl InitSpec {
    pub fn for_rank(k: usize, seed: u64) -> Result<Self> {
        Ok(InitSpec {
            width: relu_init_width(k)?,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactorModel {
    k: usize,
    n_users: usize,
    n_items: usize,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
}

impl LatentFactorModel {
    pub fn zeros(n_users: usize, n_items: usize, k: usize) -> Self {
        LatentFactorModel {
            k,
            n_users,
            n_items,
            user_factors: vec![0.0; n_users * k],
            item_factors: vec![0.0; n_items * k],
        }
    }

    pub fn from_parts(
        n_users: usize,
        n_items: usize,
        k: usize,
        user_factors: Vec<f64>,
        item_factors: Vec<f64>,
    ) -> Result<Self> {
        if user_factors.len() != n_users * k || item_factors.len() != n_items * k {
            return Err(Error::InvalidConfig(format!(
                "factor buffers of length {}/{} do not match {n_users}x{k} and {n_items}x{k}",
                user_factors.len(),
                item_factors.len()
            )));
        }
        Ok(LatentFactorModel {
            k,
            n_users,
            n_items,
            user_factors,
            item_factors,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.user_factors
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.item_factors
    }

    #[inline]
    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.k..(u + 1) * self.k]
    }

    #[inline]
    pub fn user_row_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.user_factors[u * self.k..(u + 1) * self.k]
    }

    #[inline]
    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item_factors[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn item_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.item_factors[i * self.k..(i + 1) * self.k]
    }

    /// Unchecked score `f_ui`; panics on out-of-range indices.
    #[inline]
    pub fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.user_row(u), self.item_row(i))
    }

    pub fn predict_score(&self, u: usize, i: usize) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(i)?;
        Ok(self.score(u, i))
    }

    pub fn predict_scores_for(&self, u: usize, items: &[usize]) -> Result<Vec<f64>> {
        self.check_user(u)?;
        items
            .iter()
            .map(|&i| {
                self.check_item(i)?;
                Ok(self.score(u, i))
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .all(|x| x.is_finite())
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.n_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                bound: self.n_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.n_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i,
                bound: self.n_items,
            });
        }
        Ok(())
    }
}

/// Draws every factor i.i.d. from `U(0, width)`; users first, then items.
pub fn init_model(n_users: usize, n_items: usize, k: usize, spec: &InitSpec) -> Result<LatentFactorModel> {
    if k == 0 {
        return Err(Error::InvalidConfig("factor dimension k must be >= 1".into()));
    }
    if !(spec.width > 0.0 && spec.width.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "init width must be positive, got {}",
            spec.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = Uniform::new(0.0, spec.width);
    let user_factors = (0..n_users * k).map(|_| dist.sample(&mut rng)).collect();
    let item_factors = (0..n_items * k).map(|_| dist.sample(&mut rng)).collect();
    LatentFactorModel::from_parts(n_users, n_items, k, user_factors, item_factors)
}
