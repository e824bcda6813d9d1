//! Random gradient stores for exercising estimators without a model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabError;
use crate::store::{FactorPair, FactoredGradients, GradientStore, LayerSpec, RowMatrix};

fn normal(scale: f64) -> Result<Normal<f64>, LabError> {
    Normal::new(0.0, scale)
        .map_err(|e| LabError::InvalidConfig(format!("bad scale {scale}: {e}")))
}

fn random_matrix(rng: &mut ChaCha8Rng, dist: &Normal<f64>, rows: usize, cols: usize) -> RowMatrix {
    RowMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Layers `layer0, layer1, …` with i.i.d. `N(0, scale²)` entries.
pub fn random_store(
    seed: u64,
    n_train: usize,
    dims: &[usize],
    n_query: usize,
    scale: f64,
) -> Result<GradientStore, LabError> {
    let dist = normal(scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .iter()
        .enumerate()
        .map(|(l, &d)| LayerSpec::new(format!("layer{l}"), d))
        .collect();
    let train = dims
        .iter()
        .map(|&d| random_matrix(&mut rng, &dist, n_train, d))
        .collect();
    let query = dims
        .iter()
        .map(|&d| random_matrix(&mut rng, &dist, n_query, d))
        .collect();
    Ok(GradientStore::new(layers, train, query)?)
}

/// Training rows built as `h_i ⊗ g_i` from random factors of the given
/// `(a, b)` shapes; query rows are unstructured.
pub fn random_factored_store(
    seed: u64,
    n_train: usize,
    factor_dims: &[(usize, usize)],
    n_query: usize,
) -> Result<(GradientStore, FactoredGradients), LabError> {
    let dist = normal(1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut pairs = Vec::new();
    for (l, &(a, b)) in factor_dims.iter().enumerate() {
        let h = random_matrix(&mut rng, &dist, n_train, a);
        let g = random_matrix(&mut rng, &dist, n_train, b);
        let rows: Vec<Vec<f64>> = (0..n_train)
            .map(|i| {
                h.row(i)
                    .iter()
                    .flat_map(|x| g.row(i).iter().map(move |y| x * y))
                    .collect()
            })
            .collect();
        layers.push(LayerSpec::new(format!("layer{l}"), a * b));
        train.push(RowMatrix::from_rows(&rows));
        query.push(random_matrix(&mut rng, &dist, n_query, a * b));
        pairs.push(FactorPair {
            activations: h,
            preact_grads: g,
        });
    }
    let store = GradientStore::new(layers, train, query)?;
    let factored = FactoredGradients::new(&store, pairs)?;
    Ok((store, factored))
}
