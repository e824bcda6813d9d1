//! Gradient data model: per-layer training and query gradients, optional
//! Kronecker factors, the damping rule and the validation aggregate.

mod dump;

pub use dump::{
    inspect_dump, load_dump, read_dump, read_header, save_dump, write_dump, DumpHeader,
    LayerHeader, MAGIC,
};

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected \"DINFGRD1\"")]
    BadMagic { found: [u8; 8] },
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u64),
    #[error("invalid dump header: {0}")]
    InvalidHeader(String),
    #[error("shape mismatch in layer {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("non-finite value in layer {layer} ({block}) at row {row}, column {col}")]
    NonFiniteValue {
        layer: usize,
        block: Block,
        row: usize,
        col: usize,
    },
    #[error("duplicate layer name {0:?}")]
    DuplicateLayerName(String),
    #[error("layer {0:?} has zero dimension")]
    ZeroDimension(String),
    #[error("store needs at least one layer, one training row and one query row")]
    EmptyStore,
    #[error("every training gradient in layer {layer} is zero; damping would vanish")]
    AllZeroGradients { layer: usize },
    #[error("damping scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("damping for layer {layer} must be positive and finite, got {value}")]
    NonPositiveDamping { layer: usize, value: f64 },
    #[error("query index {index} out of range for {len} query rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("query subset is empty")]
    EmptySubset,
}

/// Which block of a layer a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Train,
    Query,
    Activations,
    PreactGrads,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Block::Train => "train",
            Block::Query => "query",
            Block::Activations => "activations",
            Block::PreactGrads => "pre-activation gradients",
        };
        f.write_str(s)
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row matrix buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|p| (p / self.cols.max(1), p % self.cols.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub dim: usize,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }
}

/// Per-layer, per-example training gradients and per-query validation
/// gradients. Immutable once built; every constructor validates shapes and
/// finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    layers: Vec<LayerSpec>,
    n_train: usize,
    n_query: usize,
    train: Vec<RowMatrix>,
    query: Vec<RowMatrix>,
}

impl GradientStore {
    pub fn new(
        layers: Vec<LayerSpec>,
        train: Vec<RowMatrix>,
        query: Vec<RowMatrix>,
    ) -> Result<Self, StoreError> {
        if layers.is_empty() {
            return Err(StoreError::EmptyStore);
        }
        let n_train = train.first().map_or(0, RowMatrix::rows);
        let n_query = query.first().map_or(0, RowMatrix::rows);
        let store = Self {
            layers,
            n_train,
            n_query,
            train,
            query,
        };
        store.validate()?;
        Ok(store)
    }

    /// Checks every invariant: unique names, positive dims, consistent
    /// shapes and finite entries.
    pub fn validate(&self) -> Result<(), StoreError> {
        validate_layer_specs(&self.layers)?;
        if self.n_train == 0 || self.n_query == 0 {
            return Err(StoreError::EmptyStore);
        }
        if self.train.len() != self.layers.len() || self.query.len() != self.layers.len() {
            return Err(StoreError::ShapeMismatch {
                layer: "<store>".into(),
                detail: format!(
                    "{} layers declared but {} train / {} query blocks given",
                    self.layers.len(),
                    self.train.len(),
                    self.query.len()
                ),
            });
        }
        for (l, spec) in self.layers.iter().enumerate() {
            check_shape(spec, "train", &self.train[l], self.n_train, spec.dim)?;
            check_shape(spec, "query", &self.query[l], self.n_query, spec.dim)?;
            if let Some((row, col)) = self.train[l].first_non_finite() {
                return Err(StoreError::NonFiniteValue {
                    layer: l,
                    block: Block::Train,
                    row,
                    col,
                });
            }
            if let Some((row, col)) = self.query[l].first_non_finite() {
                return Err(StoreError::NonFiniteValue {
                    layer: l,
                    block: Block::Query,
                    row,
                    col,
                });
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn dim(&self, layer: usize) -> usize {
        self.layers[layer].dim
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(|l| l.dim).sum()
    }

    /// The `n_train × d_l` training gradient matrix of `layer`.
    pub fn train(&self, layer: usize) -> &RowMatrix {
        &self.train[layer]
    }

    /// The `n_query × d_l` validation gradient matrix of `layer`.
    pub fn query(&self, layer: usize) -> &RowMatrix {
        &self.query[layer]
    }

    #[inline]
    pub fn train_row(&self, layer: usize, i: usize) -> &[f64] {
        self.train[layer].row(i)
    }

    /// Copy with every gradient (train and query) multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, StoreError> {
        Self::new(
            self.layers.clone(),
            self.train.iter().map(|m| m.scaled(c)).collect(),
            self.query.iter().map(|m| m.scaled(c)).collect(),
        )
    }

    /// Copy with every entry rounded to the nearest `f32`, i.e. the values a
    /// dump round-trip would produce.
    pub fn to_f32_precision(&self) -> Self {
        let round = |m: &RowMatrix| RowMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&x| x as f32 as f64).collect(),
        };
        Self {
            layers: self.layers.clone(),
            n_train: self.n_train,
            n_query: self.n_query,
            train: self.train.iter().map(round).collect(),
            query: self.query.iter().map(round).collect(),
        }
    }
}

pub(crate) fn validate_layer_specs(layers: &[LayerSpec]) -> Result<(), StoreError> {
    let mut seen = HashSet::new();
    for spec in layers {
        if spec.dim == 0 {
            return Err(StoreError::ZeroDimension(spec.name.clone()));
        }
        if !seen.insert(spec.name.as_str()) {
            return Err(StoreError::DuplicateLayerName(spec.name.clone()));
        }
    }
    Ok(())
}

fn check_shape(
    spec: &LayerSpec,
    what: &str,
    m: &RowMatrix,
    rows: usize,
    cols: usize,
) -> Result<(), StoreError> {
    if m.rows() != rows || m.cols() != cols {
        return Err(StoreError::ShapeMismatch {
            layer: spec.name.clone(),
            detail: format!(
                "{what} block is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            ),
        });
    }
    Ok(())
}

/// Activation and pre-activation-gradient factors of one layer. Row `i` of
/// the layer's training gradient is `activations[i] ⊗ preact_grads[i]`,
/// flattened so that entry `p * b + q` is `activations[i][p] * preact_grads[i][q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub activations: RowMatrix,
    pub preact_grads: RowMatrix,
}

impl FactorPair {
    pub fn dims(&self) -> (usize, usize) {
        (self.activations.cols(), self.preact_grads.cols())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredGradients {
    layers: Vec<FactorPair>,
}

impl FactoredGradients {
    /// Checks the factor shapes against `store`: one pair per layer,
    /// `n_train` rows each and `a * b == d_l`.
    pub fn new(store: &GradientStore, layers: Vec<FactorPair>) -> Result<Self, StoreError> {
        let f = Self { layers };
        f.check_shapes(store)?;
        Ok(f)
    }

    pub(crate) fn check_shapes(&self, store: &GradientStore) -> Result<(), StoreError> {
        if self.layers.len() != store.num_layers() {
            return Err(StoreError::ShapeMismatch {
                layer: "<factored>".into(),
                detail: format!(
                    "{} factor pairs for {} layers",
                    self.layers.len(),
                    store.num_layers()
                ),
            });
        }
        for (l, pair) in self.layers.iter().enumerate() {
            let spec = &store.layers()[l];
            let (a, b) = pair.dims();
            if a * b != spec.dim {
                return Err(StoreError::ShapeMismatch {
                    layer: spec.name.clone(),
                    detail: format!("factor dims {a}x{b} do not multiply to {}", spec.dim),
                });
            }
            check_shape(spec, "activation", &pair.activations, store.n_train(), a)?;
            check_shape(spec, "pre-activation gradient", &pair.preact_grads, store.n_train(), b)?;
            if let Some((row, col)) = pair.activations.first_non_finite() {
                return Err(StoreError::NonFiniteValue {
                    layer: l,
                    block: Block::Activations,
                    row,
                    col,
                });
            }
            if let Some((row, col)) = pair.preact_grads.first_non_finite() {
                return Err(StoreError::NonFiniteValue {
                    layer: l,
                    block: Block::PreactGrads,
                    row,
                    col,
                });
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[FactorPair] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &FactorPair {
        &self.layers[l]
    }

    pub fn factor_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(FactorPair::dims).collect()
    }
}

/// Per-layer damping `λ_l`, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingVector(Vec<f64>);

impl DampingVector {
    pub fn new(lambda: Vec<f64>) -> Result<Self, StoreError> {
        for (layer, &value) in lambda.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(StoreError::NonPositiveDamping { layer, value });
            }
        }
        Ok(Self(lambda))
    }

    /// The same `λ` for each of `layers` layers.
    pub fn uniform(value: f64, layers: usize) -> Result<Self, StoreError> {
        Self::new(vec![value; layers])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, layer: usize) -> f64 {
        self.0[layer]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub const DEFAULT_DAMPING_SCALE: f64 = 0.1;

/// `λ_l = scale · (n·d_l)⁻¹ · Σ_i ‖∇_l ℓ_i‖²`.
pub fn compute_damping(store: &GradientStore, scale: f64) -> Result<DampingVector, StoreError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(StoreError::InvalidScale(scale));
    }
    let n = store.n_train() as f64;
    let mut lambda = Vec::with_capacity(store.num_layers());
    for l in 0..store.num_layers() {
        let sq: f64 = store.train(l).iter_rows().map(|r| crate::linalg::dot(r, r)).sum();
        if sq == 0.0 {
            return Err(StoreError::AllZeroGradients { layer: l });
        }
        lambda.push(scale * sq / (n * store.dim(l) as f64));
    }
    DampingVector::new(lambda)
}

/// Per-layer query vector `v_l`: the mean of a set of validation gradient
/// rows, or any caller-supplied vector with the store's layer dims.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationAggregate {
    layers: Vec<Vec<f64>>,
}

impl ValidationAggregate {
    pub fn from_layers(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `α·self + β·other`, layer by layer.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect())
                .collect(),
        }
    }
}

/// Mean of the selected query rows (all rows when `subset` is `None`).
pub fn validation_aggregate(
    store: &GradientStore,
    subset: Option<&[usize]>,
) -> Result<ValidationAggregate, StoreError> {
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..store.n_query()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(StoreError::EmptySubset);
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= store.n_query()) {
        return Err(StoreError::IndexOutOfRange {
            index: bad,
            len: store.n_query(),
        });
    }
    let count = idx.len() as f64;
    let layers = (0..store.num_layers())
        .map(|l| {
            let q = store.query(l);
            let mut acc = vec![0.0; q.cols()];
            for &j in idx {
                for (a, x) in acc.iter_mut().zip(q.row(j)) {
                    *a += x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count);
            acc
        })
        .collect();
    Ok(ValidationAggregate { layers })
}
