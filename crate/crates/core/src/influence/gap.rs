//! Size of the error made by swapping inversion and averaging, and the
//! `O(d_l²)` bound on it.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::Serialize;

use super::{check_damping, InfluenceError};
use crate::linalg::{dot, to_dmatrix};
use crate::store::{DampingVector, GradientStore};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub layer: usize,
    pub dim: usize,
    pub lambda: f64,
    /// `‖S̄⁻¹ − n⁻¹ Σ_i S_i⁻¹‖₂` with `S_i = ∇ℓ_i∇ℓ_iᵀ + λI` and `S̄` their mean.
    pub gap: f64,
    /// Smallest `M` with `M·d ≥ max_i tr(S_i) + tr(S̄)`.
    pub m_constant: f64,
    /// `2 M² d² / λ³`.
    pub bound: f64,
}

impl GapReport {
    pub fn bound_holds(&self) -> bool {
        self.gap >= 0.0 && self.gap <= self.bound
    }
}

pub fn approximation_gap(
    store: &GradientStore,
    damping: &DampingVector,
    layer: usize,
    dim_cap: usize,
) -> Result<GapReport, InfluenceError> {
    check_damping(store, damping)?;
    let spec = &store.layers()[layer];
    let d = spec.dim;
    if d > dim_cap {
        return Err(InfluenceError::DimensionCapExceeded {
            layer: spec.name.clone(),
            dim: d,
            cap: dim_cap,
        });
    }
    let lambda = damping.get(layer);
    let n = store.n_train() as f64;
    let phi = to_dmatrix(store.train(layer));

    let mut s_bar = phi.tr_mul(&phi) / n;
    for i in 0..d {
        s_bar[(i, i)] += lambda;
    }
    let s_bar_inv = Cholesky::new(s_bar.clone())
        .ok_or_else(|| InfluenceError::NotPositiveDefinite {
            layer: spec.name.clone(),
        })?
        .inverse();

    // n⁻¹ Σ_i S_i⁻¹ = λ⁻¹ (I − n⁻¹ Σ_i g_i g_iᵀ / (λ + ‖g_i‖²))
    let mut mean_inv = DMatrix::<f64>::identity(d, d);
    let mut max_trace = 0.0f64;
    for g in store.train(layer).iter_rows() {
        let sq = dot(g, g);
        max_trace = max_trace.max(sq + d as f64 * lambda);
        let c = 1.0 / (n * (lambda + sq));
        for r in 0..d {
            for s in 0..d {
                mean_inv[(r, s)] -= c * g[r] * g[s];
            }
        }
    }
    mean_inv /= lambda;

    let diff = &s_bar_inv - &mean_inv;
    let sym = (&diff + diff.transpose()) * 0.5;
    let gap = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, e| m.max(e.abs()));

    let m_constant = (max_trace + s_bar.trace()) / d as f64;
    let bound = 2.0 * m_constant.powi(2) * (d as f64).powi(2) / lambda.powi(3);
    Ok(GapReport {
        layer,
        dim: d,
        lambda,
        gap,
        m_constant,
        bound,
    })
}
