//! Eigenvalue-corrected Kronecker factorization (EK-FAC).
//!
//! For a layer whose per-example gradient is `h_i ⊗ g_i`, the Gram matrix is
//! approximated in the eigenbasis `Q_A ⊗ Q_B` of the factor covariances
//! `A = n⁻¹ Σ h hᵀ` and `B = n⁻¹ Σ g gᵀ`, with a diagonal fitted to the
//! projected gradients: `Λ_p = n⁻¹ Σ_j ((Q_A ⊗ Q_B)ᵀ ∇ℓ_j)_p²`.
//!
//! Flattened gradients are viewed as row-major `a × b` matrices `Y`, so
//! `(Q_A ⊗ Q_B)ᵀ vec(Y) = vec(Q_Aᵀ Y Q_B)` and the Kronecker product is never
//! materialized.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{
    check_damping, check_queries, scores_from_preconditioned, InfluenceError, InfluenceScores,
    Method,
};
use crate::linalg::{max_abs, to_dmatrix};
use crate::store::{DampingVector, FactoredGradients, GradientStore, ValidationAggregate};

/// Largest tolerated `max|h⊗g − ∇ℓ| / max|∇ℓ|` per example.
pub const FACTOR_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct EkfacLayer {
    /// Eigenvectors of `A` (columns), `a × a`.
    pub q_a: DMatrix<f64>,
    /// Eigenvectors of `B` (columns), `b × b`.
    pub q_b: DMatrix<f64>,
    /// Corrected eigenvalues, indexed `p * b + q`.
    pub corrected_diag: Vec<f64>,
}

impl EkfacLayer {
    fn dims(&self) -> (usize, usize) {
        (self.q_a.nrows(), self.q_b.nrows())
    }

    /// `(Q_A ⊗ Q_B)ᵀ x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let (a, b) = self.dims();
        let y = DMatrix::from_row_slice(a, b, x);
        let z = self.q_a.tr_mul(&y) * &self.q_b;
        row_major(&z)
    }

    /// `(Q_A ⊗ Q_B) x`.
    pub fn unproject(&self, x: &[f64]) -> Vec<f64> {
        let (a, b) = self.dims();
        let y = DMatrix::from_row_slice(a, b, x);
        let z = &self.q_a * y * self.q_b.transpose();
        row_major(&z)
    }

    /// `(Q_A ⊗ Q_B)(Λ + λI)⁻¹(Q_A ⊗ Q_B)ᵀ v`.
    pub fn precondition(&self, v: &[f64], lambda: f64) -> Vec<f64> {
        let mut w = self.project(v);
        for (wi, li) in w.iter_mut().zip(&self.corrected_diag) {
            *wi /= li + lambda;
        }
        self.unproject(&w)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

fn second_moment(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.tr_mul(m) / m.nrows() as f64
}

fn check_reconstruction(
    store: &GradientStore,
    factored: &FactoredGradients,
    layer: usize,
) -> Result<(), InfluenceError> {
    let pair = factored.layer(layer);
    let (_, b) = pair.dims();
    for i in 0..store.n_train() {
        let h = pair.activations.row(i);
        let g = pair.preact_grads.row(i);
        let row = store.train_row(layer, i);
        let mut diff = 0.0f64;
        for (p, hp) in h.iter().enumerate() {
            for (q, gq) in g.iter().enumerate() {
                diff = diff.max((hp * gq - row[p * b + q]).abs());
            }
        }
        let scale = max_abs(row).max(max_abs(h) * max_abs(g));
        let rel_err = if scale == 0.0 { 0.0 } else { diff / scale };
        if rel_err > FACTOR_TOLERANCE {
            return Err(InfluenceError::FactorReconstructionMismatch {
                layer: store.layers()[layer].name.clone(),
                row: i,
                rel_err,
            });
        }
    }
    Ok(())
}

/// Eigenbases and corrected diagonals for every layer.
pub fn ekfac_factorize(
    store: &GradientStore,
    factored: Option<&FactoredGradients>,
) -> Result<Vec<EkfacLayer>, InfluenceError> {
    let factored = factored.ok_or(InfluenceError::MissingFactoredSection)?;
    factored.check_shapes(store)?;
    let n = store.n_train() as f64;
    (0..store.num_layers())
        .map(|l| {
            check_reconstruction(store, factored, l)?;
            let pair = factored.layer(l);
            let a_cov = second_moment(&to_dmatrix(&pair.activations));
            let b_cov = second_moment(&to_dmatrix(&pair.preact_grads));
            let mut layer = EkfacLayer {
                q_a: SymmetricEigen::new(a_cov).eigenvectors,
                q_b: SymmetricEigen::new(b_cov).eigenvectors,
                corrected_diag: vec![0.0; store.dim(l)],
            };
            let mut diag = vec![0.0; store.dim(l)];
            for g in store.train(l).iter_rows() {
                for (d, x) in diag.iter_mut().zip(layer.project(g)) {
                    *d += x * x;
                }
            }
            diag.iter_mut().for_each(|d| *d /= n);
            layer.corrected_diag = diag;
            Ok(layer)
        })
        .collect()
}

pub fn ekfac_scores(
    store: &GradientStore,
    factored: Option<&FactoredGradients>,
    queries: &[ValidationAggregate],
    damping: &DampingVector,
) -> Result<InfluenceScores, InfluenceError> {
    check_queries(store, queries)?;
    check_damping(store, damping)?;
    let layers = ekfac_factorize(store, factored)?;
    let rows = queries
        .iter()
        .map(|q| {
            let r: Vec<Vec<f64>> = layers
                .iter()
                .enumerate()
                .map(|(l, f)| f.precondition(q.layer(l), damping.get(l)))
                .collect();
            scores_from_preconditioned(store, &r)
        })
        .collect();
    Ok(InfluenceScores::from_rows(Method::Ekfac, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{FactorPair, LayerSpec, RowMatrix};

    #[test]
    fn single_example_scalar() {
        let s = GradientStore::new(
            vec![LayerSpec::new("fc", 1)],
            vec![RowMatrix::from_rows(&[[2.0]])],
            vec![RowMatrix::from_rows(&[[1.0]])],
        )
        .unwrap();
        let f = FactoredGradients::new(
            &s,
            vec![FactorPair {
                activations: RowMatrix::from_rows(&[[1.0]]),
                preact_grads: RowMatrix::from_rows(&[[2.0]]),
            }],
        )
        .unwrap();
        let layers = ekfac_factorize(&s, Some(&f)).unwrap();
        assert!((layers[0].corrected_diag[0] - 4.0).abs() < 1e-15);
        let d = DampingVector::uniform(1.0, 1).unwrap();
        let v = ValidationAggregate::from_layers(vec![vec![1.0]]);
        let sc = ekfac_scores(&s, Some(&f), &[v], &d).unwrap();
        assert!((sc.get(0, 0) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn missing_section_and_mismatch() {
        let s = GradientStore::new(
            vec![LayerSpec::new("fc", 2)],
            vec![RowMatrix::from_rows(&[[1.0, 5.0]])],
            vec![RowMatrix::from_rows(&[[1.0, 1.0]])],
        )
        .unwrap();
        let d = DampingVector::uniform(1.0, 1).unwrap();
        let v = ValidationAggregate::from_layers(vec![vec![1.0, 1.0]]);
        assert!(matches!(
            ekfac_scores(&s, None, std::slice::from_ref(&v), &d),
            Err(InfluenceError::MissingFactoredSection)
        ));
        let f = FactoredGradients::new(
            &s,
            vec![FactorPair {
                activations: RowMatrix::from_rows(&[[1.0]]),
                preact_grads: RowMatrix::from_rows(&[[1.0, 2.0]]),
            }],
        )
        .unwrap();
        assert!(matches!(
            ekfac_scores(&s, Some(&f), &[v], &d),
            Err(InfluenceError::FactorReconstructionMismatch { row: 0, .. })
        ));
    }

    #[test]
    fn project_unproject_are_inverse() {
        let q_a = SymmetricEigen::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]))
            .eigenvectors;
        let q_b = SymmetricEigen::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.2, 0.0, 0.2, 3.0, 0.1, 0.0, 0.1, 2.0],
        ))
        .eigenvectors;
        let layer = EkfacLayer {
            q_a,
            q_b,
            corrected_diag: vec![0.0; 6],
        };
        let x = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let y = layer.unproject(&layer.project(&x));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
