//! Damped block-diagonal influence solved directly:
//! `-Σ_l v_lᵀ (G_l + λ_l I)⁻¹ ∇_l ℓ_k` with `G_l = n⁻¹ Σ_i ∇_l ℓ_i ∇_l ℓ_iᵀ`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use super::{
    check_damping, check_queries, scores_from_preconditioned, InfluenceError, InfluenceScores,
    Method,
};
use crate::linalg::to_dmatrix;
use crate::store::{DampingVector, GradientStore, ValidationAggregate};

pub const DEFAULT_DIM_CAP: usize = 4096;

/// How `(G_l + λ_l I)⁻¹ v_l` is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactSolver {
    /// Cholesky of the `d_l × d_l` damped Gram matrix.
    #[default]
    Primal,
    /// Woodbury identity on the `n × n` example Gram matrix:
    /// `(v − Φᵀ(nλI + ΦΦᵀ)⁻¹Φv) / λ`.
    Woodbury,
    /// Woodbury when `d_l > n`, primal otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactConfig {
    pub dim_cap: usize,
    pub solver: ExactSolver,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self {
            dim_cap: DEFAULT_DIM_CAP,
            solver: ExactSolver::Primal,
        }
    }
}

pub fn exact_scores(
    store: &GradientStore,
    queries: &[ValidationAggregate],
    damping: &DampingVector,
    config: &ExactConfig,
) -> Result<InfluenceScores, InfluenceError> {
    check_queries(store, queries)?;
    check_damping(store, damping)?;
    for spec in store.layers() {
        if spec.dim > config.dim_cap {
            return Err(InfluenceError::DimensionCapExceeded {
                layer: spec.name.clone(),
                dim: spec.dim,
                cap: config.dim_cap,
            });
        }
    }

    // r[j][l]: preconditioned vector of query j, layer l.
    let mut r: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(store.num_layers()); queries.len()];
    for l in 0..store.num_layers() {
        let solved = solve_layer(store, l, queries, damping.get(l), config.solver)?;
        for (rj, col) in r.iter_mut().zip(solved) {
            rj.push(col);
        }
    }
    let rows = r
        .iter()
        .map(|rj| scores_from_preconditioned(store, rj))
        .collect();
    Ok(InfluenceScores::from_rows(Method::Exact, rows))
}

/// `(G_l + λ I)⁻¹ v_l` for every query, one solve per layer.
pub(crate) fn solve_layer(
    store: &GradientStore,
    layer: usize,
    queries: &[ValidationAggregate],
    lambda: f64,
    solver: ExactSolver,
) -> Result<Vec<Vec<f64>>, InfluenceError> {
    let n = store.n_train();
    let d = store.dim(layer);
    let use_woodbury = match solver {
        ExactSolver::Primal => false,
        ExactSolver::Woodbury => true,
        ExactSolver::Auto => d > n,
    };
    let phi = to_dmatrix(store.train(layer));
    let rhs = DMatrix::from_fn(d, queries.len(), |i, j| queries[j].layer(layer)[i]);
    let not_pd = || InfluenceError::NotPositiveDefinite {
        layer: store.layers()[layer].name.clone(),
    };

    let solution = if use_woodbury {
        let mut k = &phi * phi.transpose();
        for i in 0..n {
            k[(i, i)] += n as f64 * lambda;
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(k).ok_or_else(not_pd)?;
        let w = &phi * &rhs;
        let z = chol.solve(&w);
        (rhs - phi.transpose() * z) / lambda
    } else {
        let mut g = phi.tr_mul(&phi) / n as f64;
        for i in 0..d {
            g[(i, i)] += lambda;
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(g).ok_or_else(not_pd)?;
        chol.solve(&rhs)
    };
    Ok(solution
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect())
}
