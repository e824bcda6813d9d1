//! Influence estimators.
//!
//! Every estimator except the retraining oracle reduces to the same final
//! step: a per-layer preconditioned query vector `r_l` is formed once per
//! query, then `score(k) = -Σ_l r_l · ∇_l ℓ_k`. A negative score means that
//! up-weighting training point `k` lowers the query loss.

mod datainf;
mod ekfac;
mod exact;
mod gap;
mod hessian_free;
mod lissa;
mod retrain;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::dot;
use crate::store::{
    DampingVector, FactoredGradients, GradientStore, StoreError, ValidationAggregate,
};

pub use datainf::datainf_scores;
pub use ekfac::{ekfac_factorize, ekfac_scores, EkfacLayer, FACTOR_TOLERANCE};
pub use exact::{exact_scores, ExactConfig, ExactSolver, DEFAULT_DIM_CAP};
pub use gap::{approximation_gap, GapReport};
pub use hessian_free::hessian_free_scores;
pub use lissa::{
    gram_apply, lissa_layer_iterates, lissa_scores, lissa_step, LissaConfig, LissaScaling, DIVERGENCE_GROWTH,
};
pub use retrain::{retraining_scores, SubsetPlan, SubsetTrainer, MAX_EXHAUSTIVE_N, MAX_SUBSETS};

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("damping has {got} entries for {expected} layers")]
    DampingMismatch { expected: usize, got: usize },
    #[error("query shape mismatch: {0}")]
    QueryShape(String),
    #[error("layer {layer:?} has dimension {dim}, above the dense cap {cap}")]
    DimensionCapExceeded { layer: String, dim: usize, cap: usize },
    #[error("damped Gram matrix of layer {layer:?} is not numerically positive definite")]
    NotPositiveDefinite { layer: String },
    #[error("LiSSA diverged: {}", format_divergence(.0))]
    Divergence(Vec<LayerDivergence>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("EK-FAC needs a factored gradient section")]
    MissingFactoredSection,
    #[error(
        "factors of layer {layer:?} row {row} do not reconstruct its gradient (relative error {rel_err:.3e})"
    )]
    FactorReconstructionMismatch { layer: String, row: usize, rel_err: f64 },
    #[error("{subsets} subsets requested, budget is {budget}")]
    SubsetBudgetExceeded { subsets: f64, budget: f64 },
    #[error("training point {point} is in {inside} of {total} subsets; both sides must be non-empty")]
    EmptySide { point: usize, inside: usize, total: usize },
    #[error("trainer failed: {0}")]
    Trainer(String),
}

/// One layer whose LiSSA iterate blew up.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDivergence {
    pub layer: usize,
    pub name: String,
    pub iteration: usize,
    /// `‖r_j‖ / ‖v_l‖` when the iterate was abandoned.
    pub growth: f64,
}

fn format_divergence(d: &[LayerDivergence]) -> String {
    d.iter()
        .map(|x| {
            format!(
                "layer {} ({}) at iteration {} (growth {:.3e})",
                x.layer, x.name, x.iteration, x.growth
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    HessianFree,
    #[serde(rename = "datainf")]
    DataInf,
    Exact,
    Lissa,
    Ekfac,
    Retraining,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::HessianFree,
        Method::DataInf,
        Method::Exact,
        Method::Lissa,
        Method::Ekfac,
        Method::Retraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::HessianFree => "hessian-free",
            Method::DataInf => "datainf",
            Method::Exact => "exact",
            Method::Lissa => "lissa",
            Method::Ekfac => "ekfac",
            Method::Retraining => "retraining",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown method {s:?}; expected one of {}",
                    Method::ALL.map(Method::name).join(", ")
                )
            })
    }
}

/// `n_queries × n_train` matrix of signed influence values.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceScores {
    method: Method,
    n_queries: usize,
    n_train: usize,
    scores: Vec<f64>,
}

impl InfluenceScores {
    pub fn from_rows(method: Method, rows: Vec<Vec<f64>>) -> Self {
        let n_queries = rows.len();
        let n_train = rows.first().map_or(0, Vec::len);
        let scores: Vec<f64> = rows.into_iter().flatten().collect();
        assert_eq!(scores.len(), n_queries * n_train, "ragged score rows");
        Self {
            method,
            n_queries,
            n_train,
            scores,
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.scores[query * self.n_train..(query + 1) * self.n_train]
    }

    pub fn get(&self, query: usize, train: usize) -> f64 {
        self.row(query)[train]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_queries).map(move |j| self.row(j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_finite(&self) -> bool {
        self.scores.iter().all(|x| x.is_finite())
    }
}

/// Which query vectors to score against.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum QuerySelection {
    /// Mean of every query row (one score row).
    #[default]
    Aggregate,
    /// Mean of the listed query rows (one score row).
    AggregateOf(Vec<usize>),
    /// Each query row on its own (one score row per query).
    Each,
    /// The listed query rows, each on its own.
    Rows(Vec<usize>),
}

impl QuerySelection {
    pub fn resolve(&self, store: &GradientStore) -> Result<Vec<ValidationAggregate>, StoreError> {
        use crate::store::validation_aggregate;
        match self {
            QuerySelection::Aggregate => Ok(vec![validation_aggregate(store, None)?]),
            QuerySelection::AggregateOf(idx) => Ok(vec![validation_aggregate(store, Some(idx))?]),
            QuerySelection::Each => (0..store.n_query())
                .map(|j| validation_aggregate(store, Some(&[j])))
                .collect(),
            QuerySelection::Rows(idx) => {
                if idx.is_empty() {
                    return Err(StoreError::EmptySubset);
                }
                idx.iter()
                    .map(|&j| validation_aggregate(store, Some(&[j])))
                    .collect()
            }
        }
    }
}

pub(crate) fn check_queries(
    store: &GradientStore,
    queries: &[ValidationAggregate],
) -> Result<(), InfluenceError> {
    if queries.is_empty() {
        return Err(InfluenceError::QueryShape("no query vectors given".into()));
    }
    for (j, q) in queries.iter().enumerate() {
        if q.num_layers() != store.num_layers() {
            return Err(InfluenceError::QueryShape(format!(
                "query {j} has {} layers, store has {}",
                q.num_layers(),
                store.num_layers()
            )));
        }
        for (l, spec) in store.layers().iter().enumerate() {
            if q.layer(l).len() != spec.dim {
                return Err(InfluenceError::QueryShape(format!(
                    "query {j} layer {} has length {}, expected {}",
                    spec.name,
                    q.layer(l).len(),
                    spec.dim
                )));
            }
            if q.layer(l).iter().any(|x| !x.is_finite()) {
                return Err(InfluenceError::QueryShape(format!(
                    "query {j} layer {} has non-finite entries",
                    spec.name
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn check_damping(
    store: &GradientStore,
    damping: &DampingVector,
) -> Result<(), InfluenceError> {
    if damping.len() != store.num_layers() {
        return Err(InfluenceError::DampingMismatch {
            expected: store.num_layers(),
            got: damping.len(),
        });
    }
    for (layer, &value) in damping.values().iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(StoreError::NonPositiveDamping { layer, value }.into());
        }
    }
    Ok(())
}

/// Settings for the estimators that take any.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub lissa: LissaConfig,
    pub exact: ExactConfig,
}

/// Runs one gradient-based estimator. `factored` is only read by EK-FAC;
/// the retraining oracle needs a trainer and is rejected here.
pub fn compute_scores(
    method: Method,
    store: &GradientStore,
    factored: Option<&FactoredGradients>,
    queries: &[ValidationAggregate],
    damping: &DampingVector,
    config: &EstimatorConfig,
) -> Result<InfluenceScores, InfluenceError> {
    match method {
        Method::HessianFree => hessian_free_scores(store, queries),
        Method::DataInf => datainf_scores(store, queries, damping),
        Method::Exact => exact_scores(store, queries, damping, &config.exact),
        Method::Lissa => lissa_scores(store, queries, damping, &config.lissa),
        Method::Ekfac => ekfac_scores(store, factored, queries, damping),
        Method::Retraining => Err(InfluenceError::InvalidConfig(
            "retraining scores need a subset trainer, not a gradient store".into(),
        )),
    }
}

/// `score(k) = -Σ_l r_l · ∇_l ℓ_k` for every training point. Each score sums
/// its layers in order, so the result is the same for any worker count.
pub(crate) fn scores_from_preconditioned(store: &GradientStore, r: &[Vec<f64>]) -> Vec<f64> {
    (0..store.n_train())
        .into_par_iter()
        .with_min_len(64)
        .map(|k| {
            let s = r
                .iter()
                .enumerate()
                .fold(0.0, |acc, (l, rl)| acc + dot(rl, store.train_row(l, k)));
            -s
        })
        .collect()
}
