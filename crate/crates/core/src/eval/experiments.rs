//! End-to-end pipelines: generate a task, train an adapter model, extract
//! gradients, score, and measure.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, class_detection, pearson};
use super::report::{ExperimentReport, Record, Status, Timing};
use super::EvalError;
use crate::influence::{
    compute_scores, EstimatorConfig, InfluenceError, InfluenceScores, Method, QuerySelection,
};
use crate::lab::{
    build_model, extract_gradients, flip_labels, generate_task, train, train_subset, LabModel,
    ModelSpec, Pretraining, SyntheticTask, TaskSpec, TrainConfig,
};
use crate::store::{compute_damping, GradientStore, DEFAULT_DAMPING_SCALE};

/// Every knob of the four pipelines; each pipeline reads the fields it
/// needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub hidden: usize,
    pub pretraining: Pretraining,
    /// `train.seed` is replaced by each run's seed; `train.rank` is the
    /// rank for single-rank experiments.
    pub train: TrainConfig,
    pub seeds: usize,
    pub base_seed: u64,
    pub ranks: Vec<usize>,
    pub damping_scale: f64,
    pub estimators: EstimatorConfig,
    pub methods: Vec<Method>,
    /// Correlate one score row per test point instead of the aggregate.
    pub per_query: bool,
    /// Rank mislabel scores by absolute value instead of signed value.
    pub absolute_auc: bool,
    /// Test points used as queries in class detection.
    pub class_queries: usize,
    pub select_fraction: f64,
    pub selection_epochs: usize,
    pub selection_methods: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec {
                n_train: 200,
                n_test: 100,
                p: 8,
                separation: 2.0,
            },
            hidden: 16,
            pretraining: Pretraining::default(),
            train: TrainConfig::default(),
            seeds: 20,
            base_seed: 0,
            ranks: vec![1, 2, 4],
            damping_scale: DEFAULT_DAMPING_SCALE,
            estimators: EstimatorConfig::default(),
            methods: vec![Method::HessianFree, Method::DataInf, Method::Exact, Method::Lissa],
            per_query: false,
            absolute_auc: false,
            class_queries: 20,
            select_fraction: 0.7,
            selection_epochs: 10,
            selection_methods: vec![Method::DataInf],
        }
    }
}

impl ExperimentConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.base_seed + k).collect()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.task.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(EvalError::InvalidConfig("need at least one seed".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(EvalError::InvalidConfig("ranks must be a non-empty list of positive values".into()));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "select fraction must be in (0, 1], got {}",
                self.select_fraction
            )));
        }
        if self.hidden == 0 {
            return Err(EvalError::InvalidConfig("hidden width must be positive".into()));
        }
        for m in self.methods.iter().chain(&self.selection_methods) {
            if matches!(m, Method::Ekfac | Method::Retraining) {
                return Err(EvalError::InvalidConfig(format!(
                    "method {m} is not available in lab experiments"
                )));
            }
        }
        Ok(())
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// A trained lab model and its gradients for one seed.
pub struct PreparedRun {
    pub task: SyntheticTask,
    /// Pretrained base with freshly initialized adapters.
    pub initial: LabModel,
    pub model: LabModel,
    pub store: GradientStore,
    pub test_accuracy: f64,
}

/// Separates the label-flip draw from the task draw.
const FLIP_SEED_OFFSET: u64 = 0x5851_f42d_4c95_7f2d;
/// Separates the random-selection baseline draw.
const RANDOM_SELECT_OFFSET: u64 = 0x1405_7b7e_f767_814f;

pub fn prepare_run(
    config: &ExperimentConfig,
    seed: u64,
    rank: usize,
    noise_rate: f64,
) -> Result<PreparedRun, EvalError> {
    let clean = generate_task(seed, config.task)?;
    let task = flip_labels(&clean, noise_rate, seed ^ FLIP_SEED_OFFSET)?;
    let initial = build_model(ModelSpec::mlp(config.hidden, rank), &task, seed, &config.pretraining)?;
    let train_config = TrainConfig {
        seed,
        rank,
        noise_rate,
        ..config.train
    };
    let (model, report) = train(&task, &initial, &train_config)?;
    let store = extract_gradients(&task, &model)?;
    Ok(PreparedRun {
        task,
        initial,
        model,
        store,
        test_accuracy: report.epoch_test_accuracy.last().copied().unwrap_or(f64::NAN),
    })
}

enum Outcome {
    Scores(InfluenceScores),
    Diverged(String),
    Skipped(String),
}

fn run_method(
    method: Method,
    store: &GradientStore,
    selection: &QuerySelection,
    config: &ExperimentConfig,
) -> Result<(Outcome, f64), EvalError> {
    if method == Method::Exact {
        if let Some(spec) = store.layers().iter().find(|s| s.dim > config.estimators.exact.dim_cap) {
            return Ok((
                Outcome::Skipped(format!(
                    "layer {} has dimension {} above the dense cap {}",
                    spec.name, spec.dim, config.estimators.exact.dim_cap
                )),
                0.0,
            ));
        }
    }
    let start = Instant::now();
    let damping = compute_damping(store, config.damping_scale)?;
    let queries = selection.resolve(store)?;
    let result = compute_scores(method, store, None, &queries, &damping, &config.estimators);
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(s) => Ok((Outcome::Scores(s), seconds)),
        Err(InfluenceError::Divergence(d)) => Ok((
            Outcome::Diverged(InfluenceError::Divergence(d).to_string()),
            seconds,
        )),
        Err(e) => Err(e.into()),
    }
}

fn timing(seed: u64, rank: usize, method: Method, seconds: f64) -> Timing {
    Timing {
        seed,
        rank,
        method: method.name().to_string(),
        seconds,
    }
}

type SeedResult = Result<(Vec<Record>, Vec<Timing>), EvalError>;

fn collect(results: Vec<SeedResult>) -> Result<(Vec<Record>, Vec<Timing>), EvalError> {
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        let (rec, t) = r?;
        records.extend(rec);
        timings.extend(t);
    }
    Ok((records, timings))
}

/// Pearson correlation of each approximation with Exact, for every rank and
/// seed.
pub fn run_correlation_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EvalError> {
    config.validate()?;
    let seeds = config.seed_list();
    let selection = if config.per_query {
        QuerySelection::Each
    } else {
        QuerySelection::Aggregate
    };
    let approximations: Vec<Method> = config
        .methods
        .iter()
        .copied()
        .filter(|&m| m != Method::Exact)
        .collect();
    let mut jobs = Vec::new();
    for &rank in &config.ranks {
        for &seed in &seeds {
            jobs.push((rank, seed));
        }
    }
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(rank, seed)| {
            let run = prepare_run(config, seed, rank, config.train.noise_rate)?;
            let mut records = vec![Record::ok(seed, rank, "model", "test_accuracy", run.test_accuracy)];
            let mut timings = Vec::new();
            let (exact, t) = run_method(Method::Exact, &run.store, &selection, config)?;
            timings.push(timing(seed, rank, Method::Exact, t));
            for &m in &approximations {
                let exact_scores = match &exact {
                    Outcome::Scores(s) => s,
                    Outcome::Skipped(note) | Outcome::Diverged(note) => {
                        records.push(Record::missing(seed, rank, m.name(), "pearson", Status::Skipped, note.clone()));
                        continue;
                    }
                };
                let (out, t) = run_method(m, &run.store, &selection, config)?;
                timings.push(timing(seed, rank, m, t));
                records.push(match out {
                    Outcome::Scores(s) => {
                        let mut corr = Vec::with_capacity(s.n_queries());
                        for (a, b) in s.iter_rows().zip(exact_scores.iter_rows()) {
                            corr.push(pearson(a, b));
                        }
                        match corr.into_iter().collect::<Result<Vec<f64>, _>>() {
                            Ok(c) => Record::ok(seed, rank, m.name(), "pearson", c.iter().sum::<f64>() / c.len() as f64),
                            Err(e) => Record::missing(seed, rank, m.name(), "pearson", Status::Skipped, e.to_string()),
                        }
                    }
                    Outcome::Diverged(note) => {
                        Record::missing(seed, rank, m.name(), "pearson", Status::Diverged, note)
                    }
                    Outcome::Skipped(note) => {
                        Record::missing(seed, rank, m.name(), "pearson", Status::Skipped, note)
                    }
                });
            }
            Ok((records, timings))
        })
        .collect();
    let (records, timings) = collect(results)?;
    Ok(ExperimentReport::new("correlation", config.config_json(), seeds, records, timings))
}

/// AUC of influence scores against the flipped-label mask.
pub fn run_mislabel_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EvalError> {
    config.validate()?;
    let seeds = config.seed_list();
    let rank = config.train.rank;
    let results: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| {
            let run = prepare_run(config, seed, rank, config.train.noise_rate)?;
            let mut records = vec![Record::ok(seed, rank, "model", "test_accuracy", run.test_accuracy)];
            let mut timings = Vec::new();
            for &m in &config.methods {
                let (out, t) = run_method(m, &run.store, &QuerySelection::Aggregate, config)?;
                if !matches!(out, Outcome::Skipped(_)) {
                    timings.push(timing(seed, rank, m, t));
                }
                records.push(match out {
                    Outcome::Scores(s) => {
                        let scores: Vec<f64> = if config.absolute_auc {
                            s.row(0).iter().map(|x| x.abs()).collect()
                        } else {
                            s.row(0).to_vec()
                        };
                        match auc(&scores, &run.task.flip_mask) {
                            Ok(a) => Record::ok(seed, rank, m.name(), "auc", a),
                            Err(e @ EvalError::SingleClass) => {
                                Record::missing(seed, rank, m.name(), "auc", Status::Skipped, e.to_string())
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    Outcome::Diverged(note) => Record::missing(seed, rank, m.name(), "auc", Status::Diverged, note),
                    Outcome::Skipped(note) => Record::missing(seed, rank, m.name(), "auc", Status::Skipped, note),
                });
            }
            Ok((records, timings))
        })
        .collect();
    let (records, timings) = collect(results)?;
    Ok(ExperimentReport::new("mislabel", config.config_json(), seeds, records, timings))
}

/// Per-test-point influence on a clean task: do same-class training points
/// get the most negative scores?
pub fn run_class_detection_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EvalError> {
    config.validate()?;
    let seeds = config.seed_list();
    let rank = config.train.rank;
    let queries = config.class_queries.clamp(1, config.task.n_test);
    let selection = QuerySelection::Rows((0..queries).collect());
    let results: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| {
            let run = prepare_run(config, seed, rank, 0.0)?;
            let train_classes: Vec<usize> = run.task.labels.iter().map(|&y| y as usize).collect();
            let query_classes: Vec<usize> = run.task.test_labels[..queries].iter().map(|&y| y as usize).collect();
            let mut records = vec![Record::ok(seed, rank, "model", "test_accuracy", run.test_accuracy)];
            let mut timings = Vec::new();
            for &m in &config.methods {
                let (out, t) = run_method(m, &run.store, &selection, config)?;
                if !matches!(out, Outcome::Skipped(_)) {
                    timings.push(timing(seed, rank, m, t));
                }
                match out {
                    Outcome::Scores(s) => {
                        let rows: Vec<&[f64]> = s.iter_rows().collect();
                        let d = class_detection(&rows, &train_classes, &query_classes)?;
                        records.push(Record::ok(seed, rank, m.name(), "auc", d.auc.mean));
                        records.push(Record::ok(seed, rank, m.name(), "recall", d.recall.mean));
                    }
                    Outcome::Diverged(note) => {
                        for metric in ["auc", "recall"] {
                            records.push(Record::missing(seed, rank, m.name(), metric, Status::Diverged, note.clone()));
                        }
                    }
                    Outcome::Skipped(note) => {
                        for metric in ["auc", "recall"] {
                            records.push(Record::missing(seed, rank, m.name(), metric, Status::Skipped, note.clone()));
                        }
                    }
                }
            }
            Ok((records, timings))
        })
        .collect();
    let (records, timings) = collect(results)?;
    Ok(ExperimentReport::new("class-detection", config.config_json(), seeds, records, timings))
}

/// Indices of the `round(fraction · n)` most negative scores, ascending.
/// Ties are broken by index.
pub fn select_most_beneficial(scores: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * scores.len() as f64).round() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

fn trajectory_records(seed: u64, rank: usize, method: &str, accuracy: &[f64]) -> Vec<Record> {
    accuracy
        .iter()
        .enumerate()
        .map(|(e, &a)| Record::ok(seed, rank, method, "test_accuracy", a).at_step(e + 1))
        .collect()
}

/// Retrains from the initial adapters on the most beneficial subset, a
/// random subset of the same size, and the full set, recording test
/// accuracy after every epoch.
pub fn run_selection_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EvalError> {
    config.validate()?;
    let seeds = config.seed_list();
    let rank = config.train.rank;
    let results: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| {
            let run = prepare_run(config, seed, rank, config.train.noise_rate)?;
            let n = run.task.n_train();
            let retrain_config = TrainConfig {
                seed,
                rank,
                epochs: config.selection_epochs,
                ..config.train
            };
            let retrain = |rows: &[usize]| -> Result<Vec<f64>, EvalError> {
                let (_, report) = train_subset(&run.task, rows, &run.initial, &retrain_config)?;
                Ok(report.epoch_test_accuracy)
            };
            let mut records = Vec::new();
            let mut timings = Vec::new();
            let mut size = ((config.select_fraction * n as f64).round() as usize).clamp(1, n);
            for &m in &config.selection_methods {
                let (out, t) = run_method(m, &run.store, &QuerySelection::Aggregate, config)?;
                timings.push(timing(seed, rank, m, t));
                match out {
                    Outcome::Scores(s) => {
                        let chosen = select_most_beneficial(s.row(0), config.select_fraction);
                        size = chosen.len();
                        records.extend(trajectory_records(seed, rank, m.name(), &retrain(&chosen)?));
                    }
                    Outcome::Diverged(note) => {
                        records.push(Record::missing(seed, rank, m.name(), "test_accuracy", Status::Diverged, note));
                    }
                    Outcome::Skipped(note) => {
                        records.push(Record::missing(seed, rank, m.name(), "test_accuracy", Status::Skipped, note));
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANDOM_SELECT_OFFSET);
            let mut random = sample(&mut rng, n, size).into_vec();
            random.sort_unstable();
            records.extend(trajectory_records(seed, rank, "random", &retrain(&random)?));
            let all: Vec<usize> = (0..n).collect();
            records.extend(trajectory_records(seed, rank, "full", &retrain(&all)?));
            Ok((records, timings))
        })
        .collect();
    let (records, timings) = collect(results)?;
    Ok(ExperimentReport::new("selection", config.config_json(), seeds, records, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_picks_most_negative() {
        let s = [0.5, -1.0, 0.0, -2.0, 3.0];
        assert_eq!(select_most_beneficial(&s, 0.4), vec![1, 3]);
        assert_eq!(select_most_beneficial(&s, 1.0), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_most_beneficial(&[1.0, 1.0, 1.0], 0.34), vec![0]);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.methods.push(Method::Ekfac);
        assert!(c.validate().is_err());
        let c = ExperimentConfig { select_fraction: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
