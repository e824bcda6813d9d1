//! Pretraining, adapter training, gradient extraction and subset trainers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{nll, LabModel, ModelSpec};
use super::task::{generate_task, SyntheticTask};
use super::LabError;
use crate::influence::SubsetTrainer;
use crate::store::{FactorPair, FactoredGradients, GradientStore, LayerSpec, RowMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_rate: f64,
    pub rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            noise_rate: 0.2,
            rank: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(LabError::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LabError::InvalidConfig("batch size must be positive".into()));
        }
        if self.rank == 0 {
            return Err(LabError::InvalidConfig("rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(LabError::InvalidConfig(format!(
                "noise rate must be in [0, 1), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

/// Full-parameter training of the base network on a fresh clean sample
/// before it is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pretraining {
    pub samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Pretraining {
    fn default() -> Self {
        Self {
            samples: 200,
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// `‖n⁻¹ Σ_i ∇ℓ_i‖` over all adapter parameters at the final iterate.
    pub final_grad_norm: f64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_test_accuracy: Vec<f64>,
}

/// Seed offset separating the pretraining sample from the task's own draws.
const PRETRAIN_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Builds a model for `task` and, for architectures with a base network,
/// pretrains the base on an independent clean sample of the same
/// distribution. Adapters are initialized afterwards so that they start
/// with a zero product.
pub fn build_model(
    spec: ModelSpec,
    task: &SyntheticTask,
    seed: u64,
    pretraining: &Pretraining,
) -> Result<LabModel, LabError> {
    let mut model = LabModel::init(spec, task.input_dim(), seed)?;
    if matches!(spec.architecture, super::model::Architecture::Logistic) || pretraining.epochs == 0 {
        return Ok(model);
    }
    if pretraining.samples < 4 || pretraining.batch_size == 0 {
        return Err(LabError::InvalidConfig(
            "pretraining needs at least 4 samples and a positive batch size".into(),
        ));
    }
    let n = pretraining.samples + pretraining.samples % 2;
    let clean = generate_task(
        seed ^ PRETRAIN_SEED_OFFSET,
        super::task::TaskSpec {
            n_train: n,
            n_test: 2,
            ..task.spec
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for epoch in 0..pretraining.epochs {
        let order = shuffled(&mut rng, n);
        for batch in order.chunks(pretraining.batch_size) {
            let weights = model.effective_weights();
            let mut gw: Vec<Vec<f64>> = model.base.iter().map(|l| vec![0.0; l.weight.len()]).collect();
            let mut gb: Vec<Vec<f64>> = model.base.iter().map(|l| vec![0.0; l.bias.len()]).collect();
            for &i in batch {
                let t = model.trace_with(&weights, clean.features.row(i), clean.labels[i]);
                if !t.loss.is_finite() {
                    return Err(LabError::NonFiniteLoss { epoch });
                }
                for (l, layer) in model.base.iter().enumerate() {
                    for (o, d) in t.deltas[l].iter().enumerate() {
                        gb[l][o] += d;
                        for (i_in, x) in t.inputs[l].iter().enumerate() {
                            gw[l][o * layer.d_in + i_in] += d * x;
                        }
                    }
                }
            }
            let step = pretraining.learning_rate / batch.len() as f64;
            for (l, layer) in model.base.iter_mut().enumerate() {
                for (w, g) in layer.weight.iter_mut().zip(&gw[l]) {
                    *w -= step * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(&gb[l]) {
                    *b -= step * g;
                }
            }
        }
    }
    let fresh = LabModel::init(spec, task.input_dim(), seed)?;
    model.adapters = fresh.adapters;
    Ok(model)
}

fn mean_gradient(
    model: &LabModel,
    weights: &[Vec<f64>],
    task: &SyntheticTask,
    rows: &[usize],
) -> (Vec<Vec<f64>>, f64) {
    let mut acc: Vec<Vec<f64>> = model.adapter_dims().iter().map(|&d| vec![0.0; d]).collect();
    let mut loss = 0.0;
    for &i in rows {
        let t = model.trace_with(weights, task.features.row(i), task.labels[i]);
        loss += t.loss;
        for (l, a) in acc.iter_mut().enumerate() {
            for (x, g) in a.iter_mut().zip(model.adapter_gradient(&t, l)) {
                *x += g;
            }
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    (acc, loss / n)
}

/// Fraction of the test split classified correctly.
pub fn test_accuracy(model: &LabModel, task: &SyntheticTask) -> f64 {
    let weights = model.effective_weights();
    let correct = task
        .test_labels
        .iter()
        .enumerate()
        .filter(|(j, &y)| (model.logit_with(&weights, task.test_features.row(*j)) > 0.0) == y)
        .count();
    correct as f64 / task.n_test() as f64
}

/// Mean negative log-likelihood over the test split.
pub fn test_loss(model: &LabModel, task: &SyntheticTask) -> f64 {
    let weights = model.effective_weights();
    let total: f64 = task
        .test_labels
        .iter()
        .enumerate()
        .map(|(j, &y)| nll(model.logit_with(&weights, task.test_features.row(j)), y))
        .sum();
    total / task.n_test() as f64
}

/// Mini-batch gradient descent on the adapter parameters over every
/// training row.
pub fn train(
    task: &SyntheticTask,
    model: &LabModel,
    config: &TrainConfig,
) -> Result<(LabModel, TrainReport), LabError> {
    let all: Vec<usize> = (0..task.n_train()).collect();
    train_subset(task, &all, model, config)
}

/// Like [`train`] on the listed rows only. Batches are drawn from a
/// per-epoch shuffle of positions in `rows`, so passing every row in
/// ascending order reproduces [`train`] exactly.
pub fn train_subset(
    task: &SyntheticTask,
    rows: &[usize],
    model: &LabModel,
    config: &TrainConfig,
) -> Result<(LabModel, TrainReport), LabError> {
    config.validate()?;
    if rows.is_empty() {
        return Err(LabError::InvalidConfig("cannot train on an empty subset".into()));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= task.n_train()) {
        return Err(LabError::InvalidConfig(format!(
            "training row {bad} out of range for {} rows",
            task.n_train()
        )));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut epoch_train_loss = Vec::with_capacity(config.epochs);
    let mut epoch_test_accuracy = Vec::with_capacity(config.epochs);
    let mut batch_rows = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        let order = shuffled(&mut rng, rows.len());
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            batch_rows.clear();
            batch_rows.extend(batch.iter().map(|&k| rows[k]));
            let weights = model.effective_weights();
            let (grad, loss) = mean_gradient(&model, &weights, task, &batch_rows);
            if !loss.is_finite() {
                return Err(LabError::NonFiniteLoss { epoch });
            }
            total += loss * batch.len() as f64;
            for (a, g) in model.adapters.iter_mut().zip(&grad) {
                for (p, gi) in a.params.iter_mut().zip(g) {
                    *p -= config.learning_rate * gi;
                }
            }
        }
        epoch_train_loss.push(total / rows.len() as f64);
        epoch_test_accuracy.push(test_accuracy(&model, task));
    }
    let weights = model.effective_weights();
    let (grad, loss) = mean_gradient(&model, &weights, task, rows);
    if !loss.is_finite() {
        return Err(LabError::NonFiniteLoss { epoch: config.epochs });
    }
    let final_grad_norm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    Ok((
        model,
        TrainReport {
            final_grad_norm,
            epoch_train_loss,
            epoch_test_accuracy,
        },
    ))
}

fn layer_names(model: &LabModel) -> Vec<String> {
    (1..=model.num_layers()).map(|l| format!("fc{l}")).collect()
}

fn gradient_rows(model: &LabModel, features: &RowMatrix, labels: &[bool]) -> Vec<RowMatrix> {
    let weights = model.effective_weights();
    let per_example: Vec<Vec<Vec<f64>>> = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let t = model.trace_with(&weights, features.row(i), labels[i]);
            (0..model.num_layers())
                .map(|l| model.adapter_gradient(&t, l))
                .collect()
        })
        .collect();
    (0..model.num_layers())
        .map(|l| {
            let rows: Vec<&[f64]> = per_example.iter().map(|g| g[l].as_slice()).collect();
            RowMatrix::from_rows(&rows)
        })
        .collect()
}

/// Per-example adapter gradients: training rows use the (possibly noisy)
/// training labels, query rows come from the test split.
pub fn extract_gradients(task: &SyntheticTask, model: &LabModel) -> Result<GradientStore, LabError> {
    let layers = layer_names(model)
        .into_iter()
        .zip(model.adapter_dims())
        .map(|(name, dim)| LayerSpec::new(name, dim))
        .collect();
    let train = gradient_rows(model, &task.features, &task.labels);
    let query = gradient_rows(model, &task.test_features, &task.test_labels);
    Ok(GradientStore::new(layers, train, query)?)
}

/// Gradients plus the Kronecker factors (layer input, pre-activation
/// gradient) of every training row. Needs dense adapters.
pub fn extract_factored(
    task: &SyntheticTask,
    model: &LabModel,
) -> Result<(GradientStore, FactoredGradients), LabError> {
    if model
        .adapters
        .iter()
        .any(|a| a.kind != super::model::AdapterKind::Dense)
    {
        return Err(LabError::InvalidConfig(
            "factored extraction needs dense adapters".into(),
        ));
    }
    let store = extract_gradients(task, model)?;
    let weights = model.effective_weights();
    let traces: Vec<_> = (0..task.n_train())
        .into_par_iter()
        .map(|i| model.trace_with(&weights, task.features.row(i), task.labels[i]))
        .collect();
    let pairs = (0..model.num_layers())
        .map(|l| {
            let h: Vec<&[f64]> = traces.iter().map(|t| t.inputs[l].as_slice()).collect();
            let g: Vec<&[f64]> = traces.iter().map(|t| t.deltas[l].as_slice()).collect();
            FactorPair {
                activations: RowMatrix::from_rows(&h),
                preact_grads: RowMatrix::from_rows(&g),
            }
        })
        .collect();
    let factored = FactoredGradients::new(&store, pairs)?;
    Ok((store, factored))
}

/// Retrains from the given initial model on each requested subset and
/// reports the mean test loss.
#[derive(Debug, Clone)]
pub struct LabSubsetTrainer {
    pub task: SyntheticTask,
    pub initial: LabModel,
    pub config: TrainConfig,
}

impl LabSubsetTrainer {
    pub fn new(task: SyntheticTask, initial: LabModel, config: TrainConfig) -> Result<Self, LabError> {
        config.validate()?;
        Ok(Self {
            task,
            initial,
            config,
        })
    }

    pub fn train_subset(&self, subset: &[usize]) -> Result<(LabModel, TrainReport), LabError> {
        train_subset(&self.task, subset, &self.initial, &self.config)
    }
}

impl SubsetTrainer for LabSubsetTrainer {
    fn n_train(&self) -> usize {
        self.task.n_train()
    }

    fn subset_loss(&self, subset: &[usize]) -> Result<f64, String> {
        let (model, _) = self.train_subset(subset).map_err(|e| e.to_string())?;
        Ok(test_loss(&model, &self.task))
    }
}

/// One-dimensional least squares: fit `θ` to minimize `½ mean (θ − y_i)²`
/// and score the squared error at a held-out target.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTask {
    pub values: Vec<f64>,
    pub target: f64,
}

impl LocationTask {
    /// Values and target drawn from `N(0, 1)`.
    pub fn generate(seed: u64, n: usize) -> Result<Self, LabError> {
        use rand_distr::{Distribution, StandardNormal};
        if n == 0 {
            return Err(LabError::InvalidTask("location task needs at least one value".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let target = StandardNormal.sample(&mut rng);
        Ok(Self { values, target })
    }

    /// Gradient descent from zero with step 1/2; converges geometrically to
    /// the subset mean.
    pub fn fit(&self, subset: &[usize]) -> f64 {
        let mut theta = 0.0;
        for _ in 0..200 {
            let grad = subset.iter().map(|&i| theta - self.values[i]).sum::<f64>() / subset.len() as f64;
            theta -= 0.5 * grad;
        }
        theta
    }

    pub fn loss(&self, theta: f64) -> f64 {
        0.5 * (theta - self.target).powi(2)
    }

    /// Per-example gradients `θ* − y_i` at the full-data fit and the query
    /// gradient `θ* − target`.
    pub fn gradient_store(&self) -> Result<GradientStore, LabError> {
        let all: Vec<usize> = (0..self.values.len()).collect();
        let theta = self.fit(&all);
        let train: Vec<[f64; 1]> = self.values.iter().map(|y| [theta - y]).collect();
        Ok(GradientStore::new(
            vec![LayerSpec::new("location", 1)],
            vec![RowMatrix::from_rows(&train)],
            vec![RowMatrix::from_rows(&[[theta - self.target]])],
        )?)
    }
}

impl SubsetTrainer for LocationTask {
    fn n_train(&self) -> usize {
        self.values.len()
    }

    fn subset_loss(&self, subset: &[usize]) -> Result<f64, String> {
        Ok(self.loss(self.fit(subset)))
    }
}
