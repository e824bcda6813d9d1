//! Retraining-based influence: mean test loss of models trained on subsets
//! that contain a point minus the mean over subsets that do not. A point
//! that helps has a negative score, matching the other estimators.

use itertools::Itertools;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{InfluenceError, InfluenceScores, Method};

/// Largest training set allowed for exhaustive enumeration.
pub const MAX_EXHAUSTIVE_N: usize = 30;
/// Largest number of subsets trained in either mode.
pub const MAX_SUBSETS: usize = 100_000;

/// Trains on a subset of a fixed training set and reports the loss at a
/// fixed test point. Must be deterministic.
pub trait SubsetTrainer: Sync {
    fn n_train(&self) -> usize;

    /// `subset` is sorted ascending and non-empty.
    fn subset_loss(&self, subset: &[usize]) -> Result<f64, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetPlan {
    /// Every subset of the requested size.
    Exhaustive,
    /// `count` subsets drawn uniformly without replacement within each subset.
    Sampled { count: usize, seed: u64 },
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn retraining_scores<T: SubsetTrainer + ?Sized>(
    trainer: &T,
    subset_size: usize,
    plan: SubsetPlan,
) -> Result<InfluenceScores, InfluenceError> {
    let n = trainer.n_train();
    if subset_size == 0 || subset_size > n {
        return Err(InfluenceError::InvalidConfig(format!(
            "subset size {subset_size} must be in 1..={n}"
        )));
    }
    let subsets: Vec<Vec<usize>> = match plan {
        SubsetPlan::Exhaustive => {
            let count = binomial(n, subset_size);
            if n > MAX_EXHAUSTIVE_N || count > MAX_SUBSETS as f64 {
                return Err(InfluenceError::SubsetBudgetExceeded {
                    subsets: count,
                    budget: MAX_SUBSETS as f64,
                });
            }
            (0..n).combinations(subset_size).collect()
        }
        SubsetPlan::Sampled { count, seed } => {
            if count > MAX_SUBSETS {
                return Err(InfluenceError::SubsetBudgetExceeded {
                    subsets: count as f64,
                    budget: MAX_SUBSETS as f64,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let mut s = sample(&mut rng, n, subset_size).into_vec();
                    s.sort_unstable();
                    s
                })
                .collect()
        }
    };

    let losses: Vec<f64> = subsets
        .par_iter()
        .map(|s| trainer.subset_loss(s))
        .collect::<Result<_, _>>()
        .map_err(InfluenceError::Trainer)?;

    let mut in_sum = vec![0.0; n];
    let mut in_count = vec![0usize; n];
    let mut total = 0.0;
    for (s, &loss) in subsets.iter().zip(&losses) {
        total += loss;
        for &i in s {
            in_sum[i] += loss;
            in_count[i] += 1;
        }
    }
    let m = subsets.len();
    let scores = (0..n)
        .map(|i| {
            let inside = in_count[i];
            if inside == 0 || inside == m {
                return Err(InfluenceError::EmptySide {
                    point: i,
                    inside,
                    total: m,
                });
            }
            let mean_in = in_sum[i] / inside as f64;
            let mean_out = (total - in_sum[i]) / (m - inside) as f64;
            Ok(mean_in - mean_out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InfluenceScores::from_rows(Method::Retraining, vec![scores]))
}
