use super::{check_queries, scores_from_preconditioned, InfluenceError, InfluenceScores, Method};
use crate::store::{GradientStore, ValidationAggregate};

/// First-order similarity `-Σ_l v_l · ∇_l ℓ_k`; no curvature, no damping.
pub fn hessian_free_scores(
    store: &GradientStore,
    queries: &[ValidationAggregate],
) -> Result<InfluenceScores, InfluenceError> {
    check_queries(store, queries)?;
    let rows = queries
        .iter()
        .map(|q| scores_from_preconditioned(store, q.layers()))
        .collect();
    Ok(InfluenceScores::from_rows(Method::HessianFree, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{LayerSpec, RowMatrix};

    #[test]
    fn scalar_dot_product() {
        let s = GradientStore::new(
            vec![LayerSpec::new("a", 1)],
            vec![RowMatrix::from_rows(&[[1.0]])],
            vec![RowMatrix::from_rows(&[[1.0]])],
        )
        .unwrap();
        let v = ValidationAggregate::from_layers(vec![vec![1.0]]);
        assert_eq!(hessian_free_scores(&s, &[v]).unwrap().get(0, 0), -1.0);
    }

    #[test]
    fn orthogonal_and_layer_sum() {
        let s = GradientStore::new(
            vec![LayerSpec::new("a", 2), LayerSpec::new("b", 1)],
            vec![
                RowMatrix::from_rows(&[[0.0, 1.0], [0.3, 0.0]]),
                RowMatrix::from_rows(&[[0.0], [-0.1]]),
            ],
            vec![RowMatrix::zeros(1, 2), RowMatrix::zeros(1, 1)],
        )
        .unwrap();
        let v = ValidationAggregate::from_layers(vec![vec![1.0, 0.0], vec![1.0]]);
        let sc = hessian_free_scores(&s, &[v]).unwrap();
        assert_eq!(sc.get(0, 0), 0.0);
        // per-layer dots 0.3 and -0.1
        assert!((sc.get(0, 1) - (-0.2)).abs() < 1e-15);
    }
}
