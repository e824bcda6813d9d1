//! Closed-form influence: the inverse of the averaged damped Gram matrix is
//! replaced by the average of per-example inverses, each of which is a
//! Sherman–Morrison rank-one correction of `λ⁻¹ I`.

use super::{
    check_damping, check_queries, scores_from_preconditioned, InfluenceError, InfluenceScores,
    Method,
};
use crate::linalg::{axpy, dot};
use crate::store::{DampingVector, GradientStore, ValidationAggregate};

/// `r_l = λ_l⁻¹ (v_l − n⁻¹ Σ_i c_i ∇_l ℓ_i)` with
/// `c_i = (v_l·∇_l ℓ_i) / (λ_l + ‖∇_l ℓ_i‖²)`.
///
/// One pass over the training rows, `O(d_l)` extra memory; the `n × n` Gram
/// matrix is never formed.
pub(crate) fn datainf_layer(store: &GradientStore, layer: usize, v: &[f64], lambda: f64) -> Vec<f64> {
    let train = store.train(layer);
    let mut acc = vec![0.0; v.len()];
    for g in train.iter_rows() {
        let c = dot(v, g) / (lambda + dot(g, g));
        axpy(c, g, &mut acc);
    }
    let n = train.rows() as f64;
    v.iter()
        .zip(&acc)
        .map(|(vi, ai)| (vi - ai / n) / lambda)
        .collect()
}

pub fn datainf_scores(
    store: &GradientStore,
    queries: &[ValidationAggregate],
    damping: &DampingVector,
) -> Result<InfluenceScores, InfluenceError> {
    check_queries(store, queries)?;
    check_damping(store, damping)?;
    let rows = queries
        .iter()
        .map(|q| {
            let r: Vec<Vec<f64>> = (0..store.num_layers())
                .map(|l| datainf_layer(store, l, q.layer(l), damping.get(l)))
                .collect();
            scores_from_preconditioned(store, &r)
        })
        .collect();
    Ok(InfluenceScores::from_rows(Method::DataInf, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{LayerSpec, RowMatrix};

    fn store(train: &[&[f64]], dim: usize) -> GradientStore {
        GradientStore::new(
            vec![LayerSpec::new("a", dim)],
            vec![RowMatrix::from_rows(train)],
            vec![RowMatrix::zeros(1, dim)],
        )
        .unwrap()
    }

    #[test]
    fn single_point_matches_sherman_morrison() {
        let s = store(&[&[1.0, 0.0]], 2);
        let v = ValidationAggregate::from_layers(vec![vec![1.0, 0.0]]);
        let d = DampingVector::uniform(1.0, 1).unwrap();
        let sc = datainf_scores(&s, &[v], &d).unwrap();
        assert!((sc.get(0, 0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_gradients() {
        let s = store(&[&[1.0], &[1.0]], 1);
        let v = ValidationAggregate::from_layers(vec![vec![1.0]]);
        let d = DampingVector::uniform(0.5, 1).unwrap();
        let sc = datainf_scores(&s, &[v], &d).unwrap();
        for k in 0..2 {
            assert!((sc.get(0, k) + 2.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_per_example_inverse_average() {
        // Direct evaluation of Σ_l λ⁻¹ (n⁻¹ Σ_i L_i L_ik / (λ + L_ii) − L_k).
        let rows: [&[f64]; 3] = [&[0.5, -1.0], &[2.0, 0.25], &[-0.75, 1.5]];
        let s = store(&rows, 2);
        let v = [0.3, -0.7];
        let lambda = 0.2;
        let d = DampingVector::uniform(lambda, 1).unwrap();
        let sc = datainf_scores(&s, &[ValidationAggregate::from_layers(vec![v.to_vec()])], &d)
            .unwrap();
        for k in 0..3 {
            let lk = dot(&v, rows[k]);
            let mut sum = 0.0;
            for g in rows {
                sum += dot(&v, g) * dot(g, rows[k]) / (lambda + dot(g, g));
            }
            let expected = (sum / 3.0 - lk) / lambda;
            assert!((sc.get(0, k) - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_wrong_damping_length() {
        let s = store(&[&[1.0]], 1);
        let v = ValidationAggregate::from_layers(vec![vec![1.0]]);
        let d = DampingVector::uniform(0.5, 2).unwrap();
        assert!(matches!(
            datainf_scores(&s, &[v], &d),
            Err(InfluenceError::DampingMismatch { expected: 1, got: 2 })
        ));
    }
}
