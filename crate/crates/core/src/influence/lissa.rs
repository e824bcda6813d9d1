//! Neumann-series inverse-HVP (LiSSA), matrix-free.
//!
//! With operator scaling `s`, the recursion is
//! `r_j = v + (I − s(G + λI)) r_{j−1}`, `r_0 = v`, and `s·r_J` estimates
//! `(G + λI)⁻¹ v`. It converges when `s(G + λI) ⪯ I`.

use serde::{Deserialize, Serialize};

use super::{
    check_damping, check_queries, scores_from_preconditioned, InfluenceError, InfluenceScores,
    LayerDivergence, Method,
};
use crate::linalg::{axpy, dot, norm};
use crate::store::{DampingVector, GradientStore, ValidationAggregate};

/// An iterate whose norm exceeds this multiple of `‖v_l‖` is declared divergent.
pub const DIVERGENCE_GROWTH: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LissaScaling {
    /// Per layer `1 / (λ_l + max_i ‖∇_l ℓ_i‖²)`, which bounds the top
    /// eigenvalue of `s(G_l + λ_l I)` by one.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    pub iterations: usize,
    pub scaling: LissaScaling,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            scaling: LissaScaling::Auto,
        }
    }
}

impl LissaConfig {
    pub fn validate(&self) -> Result<(), InfluenceError> {
        if self.iterations == 0 {
            return Err(InfluenceError::InvalidConfig(
                "LiSSA needs at least one iteration".into(),
            ));
        }
        if let LissaScaling::Fixed(s) = self.scaling {
            if !(s.is_finite() && s > 0.0) {
                return Err(InfluenceError::InvalidConfig(format!(
                    "LiSSA scaling must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    fn scaling_for(&self, store: &GradientStore, layer: usize, lambda: f64) -> f64 {
        match self.scaling {
            LissaScaling::Fixed(s) => s,
            LissaScaling::Auto => {
                let max_sq = store
                    .train(layer)
                    .iter_rows()
                    .map(|g| dot(g, g))
                    .fold(0.0, f64::max);
                1.0 / (lambda + max_sq)
            }
        }
    }
}

/// `G_l r = n⁻¹ Σ_i (∇_l ℓ_i · r) ∇_l ℓ_i`, two passes over the rows and no
/// `d × d` storage.
pub fn gram_apply(store: &GradientStore, layer: usize, r: &[f64]) -> Vec<f64> {
    let train = store.train(layer);
    let mut out = vec![0.0; r.len()];
    for g in train.iter_rows() {
        axpy(dot(g, r), g, &mut out);
    }
    let n = train.rows() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// One unscaled update `r ← v + r − s (G_l + λ I) r`. Its fixed point is
/// `(G_l + λ I)⁻¹ v / s`.
pub fn lissa_step(store: &GradientStore, layer: usize, v: &[f64], r: &[f64], lambda: f64, s: f64) -> Vec<f64> {
    let gr = gram_apply(store, layer, r);
    v.iter()
        .zip(r)
        .zip(&gr)
        .map(|((vi, ri), gi)| vi + ri - s * (gi + lambda * ri))
        .collect()
}

/// The rescaled estimates `s·r_j` for `j = 0..=iterations`, with no
/// divergence check. Meant for convergence diagnostics.
pub fn lissa_layer_iterates(
    store: &GradientStore,
    layer: usize,
    v: &[f64],
    lambda: f64,
    scaling: f64,
    iterations: usize,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(iterations + 1);
    let mut r = v.to_vec();
    out.push(r.iter().map(|x| scaling * x).collect());
    for _ in 0..iterations {
        r = lissa_step(store, layer, v, &r, lambda, scaling);
        out.push(r.iter().map(|x| scaling * x).collect());
    }
    out
}

fn lissa_layer(
    store: &GradientStore,
    layer: usize,
    v: &[f64],
    lambda: f64,
    config: &LissaConfig,
) -> Result<Vec<f64>, LayerDivergence> {
    let s = config.scaling_for(store, layer, lambda);
    let v_norm = norm(v);
    let mut r = v.to_vec();
    for j in 1..=config.iterations {
        r = lissa_step(store, layer, v, &r, lambda, s);
        let r_norm = norm(&r);
        let blown = !r_norm.is_finite() || (v_norm > 0.0 && r_norm > DIVERGENCE_GROWTH * v_norm);
        if blown {
            return Err(LayerDivergence {
                layer,
                name: store.layers()[layer].name.clone(),
                iteration: j,
                growth: r_norm / v_norm,
            });
        }
    }
    Ok(r.into_iter().map(|x| s * x).collect())
}

pub fn lissa_scores(
    store: &GradientStore,
    queries: &[ValidationAggregate],
    damping: &DampingVector,
    config: &LissaConfig,
) -> Result<InfluenceScores, InfluenceError> {
    check_queries(store, queries)?;
    check_damping(store, damping)?;
    config.validate()?;
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let mut r = Vec::with_capacity(store.num_layers());
        let mut diverged = Vec::new();
        for l in 0..store.num_layers() {
            match lissa_layer(store, l, q.layer(l), damping.get(l), config) {
                Ok(rl) => r.push(rl),
                Err(d) => diverged.push(d),
            }
        }
        if !diverged.is_empty() {
            return Err(InfluenceError::Divergence(diverged));
        }
        rows.push(scores_from_preconditioned(store, &r));
    }
    Ok(InfluenceScores::from_rows(Method::Lissa, rows))
}
