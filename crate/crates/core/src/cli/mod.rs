//! The `datatk` command line: `compute`, `experiment`, `inspect` and
//! `make-dump`.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numeric failure,
//! 4 I/O error.

mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    run_class_detection_experiment, run_correlation_experiment, run_mislabel_experiment,
    run_selection_experiment, EvalError, ExperimentConfig, VERSION,
};
use crate::influence::{
    compute_scores, EstimatorConfig, ExactConfig, ExactSolver, InfluenceError, LissaConfig,
    LissaScaling, Method, QuerySelection,
};
use crate::lab::{
    build_model, extract_factored, extract_gradients, flip_labels, generate_task, train,
    AdapterKind, LabError, ModelSpec, Pretraining, TaskSpec, TrainConfig,
};
use crate::store::{compute_damping, inspect_dump, load_dump, save_dump, StoreError};

pub use config::resolve;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Environment variable read when `--workers` is absent.
pub const WORKERS_ENV: &str = "DATATK_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn with_context(self, context: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{context}: {m}")),
            CliError::Validation(m) => CliError::Validation(format!("{context}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{context}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{context}: {m}")),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<InfluenceError> for CliError {
    fn from(e: InfluenceError) -> Self {
        match e {
            InfluenceError::Store(s) => s.into(),
            InfluenceError::Divergence(_)
            | InfluenceError::NotPositiveDefinite { .. }
            | InfluenceError::Trainer(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            LabError::Store(s) => s.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Lab(l) => CliError::from(l).with_context("lab stage"),
            EvalError::Influence(i) => CliError::from(i).with_context("scoring stage"),
            EvalError::Store(s) => CliError::from(s).with_context("gradient stage"),
            EvalError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numeric(format!("metric stage: {e}")),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "datatk", version, about = "Training-data influence estimation from per-layer gradients")]
pub struct Cli {
    /// Worker threads; falls back to DATATK_WORKERS, then to all cores.
    /// One worker makes every output reproducible byte for byte.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every training point of a gradient dump.
    Compute(ComputeArgs),
    /// Run an evaluation pipeline on the model lab.
    Experiment(ExperimentArgs),
    /// Print the header of a gradient dump.
    Inspect {
        path: PathBuf,
    },
    /// Train a lab model and write its gradients as a dump.
    MakeDump(MakeDumpArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComputeArgs {
    /// JSON file with flat keys named like the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Gradient dump to read.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// hessian-free, datainf, exact, lissa or ekfac.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// Scores CSV to write.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON sidecar (defaults to the CSV path with a .json extension).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub damping_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lissa_iters: Option<usize>,
    /// Fixed LiSSA operator scaling (automatic per layer when absent).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lissa_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_cap: Option<usize>,
    /// primal, woodbury or auto.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_solver: Option<String>,
    /// aggregate, each, aggregate:I,J,... or rows:I,J,...
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComputeSettings {
    pub input: Option<PathBuf>,
    pub method: Option<Method>,
    pub out: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub damping_scale: f64,
    pub lissa_iters: usize,
    pub lissa_scale: Option<f64>,
    pub exact_cap: usize,
    pub exact_solver: ExactSolver,
    pub queries: String,
}

impl Default for ComputeSettings {
    fn default() -> Self {
        let exact = ExactConfig::default();
        Self {
            input: None,
            method: None,
            out: None,
            sidecar: None,
            damping_scale: crate::store::DEFAULT_DAMPING_SCALE,
            lissa_iters: LissaConfig::default().iterations,
            lissa_scale: None,
            exact_cap: exact.dim_cap,
            exact_solver: exact.solver,
            queries: "aggregate".into(),
        }
    }
}

impl ComputeSettings {
    fn estimators(&self) -> EstimatorConfig {
        EstimatorConfig {
            lissa: LissaConfig {
                iterations: self.lissa_iters,
                scaling: self.lissa_scale.map_or(LissaScaling::Auto, LissaScaling::Fixed),
            },
            exact: ExactConfig {
                dim_cap: self.exact_cap,
                solver: self.exact_solver,
            },
        }
    }
}

fn parse_indices(list: &str) -> Result<Vec<usize>, CliError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad query index {s:?}")))
        })
        .collect()
}

/// Parses `aggregate`, `each`, `aggregate:0,2` or `rows:1,3`.
pub fn parse_queries(spec: &str) -> Result<QuerySelection, CliError> {
    match spec.split_once(':') {
        None if spec == "aggregate" => Ok(QuerySelection::Aggregate),
        None if spec == "each" => Ok(QuerySelection::Each),
        Some(("aggregate", list)) => Ok(QuerySelection::AggregateOf(parse_indices(list)?)),
        Some(("rows", list)) => Ok(QuerySelection::Rows(parse_indices(list)?)),
        _ => Err(CliError::Usage(format!(
            "bad query selection {spec:?}; use aggregate, each, aggregate:I,J or rows:I,J"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Correlation,
    Mislabel,
    ClassDetection,
    Selection,
}

/// Lab settings shared by `experiment` and `make-dump`.
#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct LabArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LabSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub p: usize,
    pub separation: f64,
    pub noise_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub pretrain_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
}

impl LabSettings {
    fn from_config(c: &ExperimentConfig) -> Self {
        Self {
            n_train: c.task.n_train,
            n_test: c.task.n_test,
            p: c.task.p,
            separation: c.task.separation,
            noise_rate: c.train.noise_rate,
            epochs: c.train.epochs,
            learning_rate: c.train.learning_rate,
            batch_size: c.train.batch_size,
            hidden: c.hidden,
            pretrain_samples: c.pretraining.samples,
            pretrain_epochs: c.pretraining.epochs,
            pretrain_learning_rate: c.pretraining.learning_rate,
        }
    }

    fn task(&self) -> TaskSpec {
        TaskSpec {
            n_train: self.n_train,
            n_test: self.n_test,
            p: self.p,
            separation: self.separation,
        }
    }

    fn train(&self, seed: u64, rank: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            noise_rate: self.noise_rate,
            rank,
        }
    }

    fn pretraining(&self) -> Pretraining {
        Pretraining {
            samples: self.pretrain_samples,
            epochs: self.pretrain_epochs,
            learning_rate: self.pretrain_learning_rate,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentArgs {
    /// Pipeline to run.
    #[serde(skip)]
    pub name: ExperimentName,
    /// JSON file with flat keys named like the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub lab: LabArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    /// Adapter rank for single-rank experiments.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Comma-separated ranks for the correlation experiment.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub damping_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lissa_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lissa_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_cap: Option<usize>,
    /// Comma-separated estimators.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_methods: Option<Vec<Method>>,
    /// Rank mislabel scores by absolute value.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absolute_auc: Option<bool>,
    /// Correlate per test point instead of the aggregate.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_query: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_queries: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_epochs: Option<usize>,
    /// Directory for `<name>.json` and `<name>.csv`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentSettings {
    #[serde(flatten)]
    pub lab: LabSettings,
    pub seeds: usize,
    pub base_seed: u64,
    pub rank: usize,
    pub ranks: Vec<usize>,
    pub damping_scale: f64,
    pub lissa_iters: usize,
    pub lissa_scale: Option<f64>,
    pub exact_cap: usize,
    pub methods: Vec<Method>,
    pub selection_methods: Vec<Method>,
    pub absolute_auc: bool,
    pub per_query: bool,
    pub class_queries: usize,
    pub select_fraction: f64,
    pub selection_epochs: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let c = ExperimentConfig::default();
        Self {
            lab: LabSettings::from_config(&c),
            seeds: c.seeds,
            base_seed: c.base_seed,
            rank: c.train.rank,
            ranks: c.ranks.clone(),
            damping_scale: c.damping_scale,
            lissa_iters: c.estimators.lissa.iterations,
            lissa_scale: None,
            exact_cap: c.estimators.exact.dim_cap,
            methods: c.methods.clone(),
            selection_methods: c.selection_methods.clone(),
            absolute_auc: c.absolute_auc,
            per_query: c.per_query,
            class_queries: c.class_queries,
            select_fraction: c.select_fraction,
            selection_epochs: c.selection_epochs,
            out_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentSettings {
    pub fn to_config(&self) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            task: self.lab.task(),
            hidden: self.lab.hidden,
            pretraining: self.lab.pretraining(),
            train: self.lab.train(self.base_seed, self.rank),
            seeds: self.seeds,
            base_seed: self.base_seed,
            ranks: self.ranks.clone(),
            damping_scale: self.damping_scale,
            estimators: EstimatorConfig {
                lissa: LissaConfig {
                    iterations: self.lissa_iters,
                    scaling: self.lissa_scale.map_or(LissaScaling::Auto, LissaScaling::Fixed),
                },
                exact: ExactConfig {
                    dim_cap: self.exact_cap,
                    ..base.estimators.exact
                },
            },
            methods: self.methods.clone(),
            per_query: self.per_query,
            absolute_auc: self.absolute_auc,
            class_queries: self.class_queries,
            select_fraction: self.select_fraction,
            selection_epochs: self.selection_epochs,
            selection_methods: self.selection_methods.clone(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MakeDumpArgs {
    /// JSON file with flat keys named like the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dump file to write; a JSON sidecar goes next to it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub lab: LabArgs,
    /// low-rank or dense.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    /// Also write the Kronecker factors (needs dense adapters).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factored: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MakeDumpSettings {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub rank: usize,
    #[serde(flatten)]
    pub lab: LabSettings,
    pub adapter: AdapterKind,
    pub factored: bool,
}

impl Default for MakeDumpSettings {
    fn default() -> Self {
        Self {
            out: None,
            seed: 0,
            rank: TrainConfig::default().rank,
            lab: LabSettings::from_config(&ExperimentConfig::default()),
            adapter: AdapterKind::LowRank,
            factored: false,
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run_cli(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("datatk: error: {e}");
            e.exit_code()
        }
    }
}

fn worker_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let value = match flag {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| {
                CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {s:?}"))
            })?),
            Err(_) => None,
        },
    };
    if value == Some(0) {
        return Err(CliError::Usage("worker count must be positive".into()));
    }
    Ok(value)
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    let workers = worker_count(cli.workers)?;
    let command = cli.command;
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| dispatch(command))
        }
        None => dispatch(command),
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Compute(args) => cmd_compute(&args),
        Command::Experiment(args) => cmd_experiment(&args),
        Command::Inspect { path } => cmd_inspect(&path),
        Command::MakeDump(args) => cmd_make_dump(&args),
    }
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (flag or config key)")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn cmd_compute(args: &ComputeArgs) -> Result<(), CliError> {
    let settings: ComputeSettings = resolve(&ComputeSettings::default(), args.config.as_deref(), args)?;
    let input = required(&settings.input, "input")?;
    let method = required(&settings.method, "method")?;
    let out = required(&settings.out, "out")?;
    if method == Method::Retraining {
        return Err(CliError::Usage(
            "retraining needs a subset trainer and is only available from the library".into(),
        ));
    }
    let selection = parse_queries(&settings.queries)?;
    let estimators = settings.estimators();
    estimators.lissa.validate()?;
    if !(settings.damping_scale.is_finite() && settings.damping_scale > 0.0) {
        return Err(CliError::Validation(format!(
            "damping scale must be positive, got {}",
            settings.damping_scale
        )));
    }

    let start = Instant::now();
    let (store, factored) = load_dump(&input).map_err(|e| CliError::from(e).with_context(&input.display().to_string()))?;
    let load_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let damping = compute_damping(&store, settings.damping_scale)?;
    let queries = selection.resolve(&store)?;
    let damping_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let scores = compute_scores(method, &store, factored.as_ref(), &queries, &damping, &estimators)?;
    let score_seconds = start.elapsed().as_secs_f64();

    let resolved = serde_json::to_value(&settings).expect("settings serialize");
    let mut w = create(&out)?;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "# datatk {VERSION} compute")?;
        writeln!(w, "# config {resolved}")?;
        writeln!(w, "query_index,train_index,score")?;
        for (j, row) in scores.iter_rows().enumerate() {
            for (k, s) in row.iter().enumerate() {
                writeln!(w, "{j},{k},{s}")?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| io_error(&out, e))?;

    let sidecar = settings.sidecar.clone().unwrap_or_else(|| out.with_extension("json"));
    write_json(
        &sidecar,
        &serde_json::json!({
            "version": VERSION,
            "config": resolved,
            "method": method,
            "n_queries": scores.n_queries(),
            "n_train": scores.n_train(),
            "layers": store.layers().iter().map(|l| serde_json::json!({"name": l.name, "dim": l.dim})).collect::<Vec<_>>(),
            "damping": damping.values(),
            "timings": {
                "load_seconds": load_seconds,
                "damping_seconds": damping_seconds,
                "score_seconds": score_seconds,
            },
        }),
    )?;
    eprintln!(
        "datatk: {method} scores for {} queries x {} training points written to {}",
        scores.n_queries(),
        scores.n_train(),
        out.display()
    );
    Ok(())
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let settings: ExperimentSettings =
        resolve(&ExperimentSettings::default(), args.config.as_deref(), args)?;
    let config = settings.to_config();
    let name = args.name;
    let label = name.to_possible_value().expect("named").get_name().to_string();
    let run = match name {
        ExperimentName::Correlation => run_correlation_experiment(&config),
        ExperimentName::Mislabel => run_mislabel_experiment(&config),
        ExperimentName::ClassDetection => run_class_detection_experiment(&config),
        ExperimentName::Selection => run_selection_experiment(&config),
    };
    let report = run.map_err(|e| CliError::from(e).with_context(&format!("experiment {label} failed")))?;
    std::fs::create_dir_all(&settings.out_dir).map_err(|e| io_error(&settings.out_dir, e))?;
    let json = settings.out_dir.join(format!("{label}.json"));
    let csv = settings.out_dir.join(format!("{label}.csv"));
    std::fs::write(&json, report.to_json()).map_err(|e| io_error(&json, e))?;
    std::fs::write(&csv, report.to_csv()).map_err(|e| io_error(&csv, e))?;
    for s in &report.summaries {
        if let Some(m) = s.summary {
            let step = s.step.map(|e| format!(" epoch {e}")).unwrap_or_default();
            eprintln!(
                "datatk: rank {} {} {}{}: {:.4} ± {:.4} (n={}, excluded {})",
                s.rank, s.method, s.metric, step, m.mean, m.ci_half_width, m.n, s.excluded
            );
        }
    }
    eprintln!("datatk: wrote {} and {}", json.display(), csv.display());
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let header = inspect_dump(path).map_err(|e| CliError::from(e).with_context(&path.display().to_string()))?;
    println!("{}", serde_json::to_string_pretty(&header).expect("header serializes"));
    Ok(())
}

pub fn cmd_make_dump(args: &MakeDumpArgs) -> Result<(), CliError> {
    let settings: MakeDumpSettings = resolve(&MakeDumpSettings::default(), args.config.as_deref(), args)?;
    let out = required(&settings.out, "out")?;
    if settings.factored && settings.adapter != AdapterKind::Dense {
        return Err(CliError::Usage("--factored needs --adapter dense".into()));
    }
    let lab = &settings.lab;
    let clean = generate_task(settings.seed, lab.task())?;
    let task = flip_labels(&clean, lab.noise_rate, settings.seed.wrapping_add(1))?;
    let spec = ModelSpec {
        adapter: settings.adapter,
        ..ModelSpec::mlp(lab.hidden, settings.rank)
    };
    let initial = build_model(spec, &task, settings.seed, &lab.pretraining())?;
    let (model, report) = train(&task, &initial, &lab.train(settings.seed, settings.rank))?;
    let (store, factored) = if settings.factored {
        let (s, f) = extract_factored(&task, &model)?;
        (s, Some(f))
    } else {
        (extract_gradients(&task, &model)?, None)
    };
    save_dump(&store, factored.as_ref(), &out).map_err(|e| CliError::from(e).with_context(&out.display().to_string()))?;
    write_json(
        &out.with_extension("json"),
        &serde_json::json!({
            "version": VERSION,
            "config": settings,
            "test_accuracy": report.epoch_test_accuracy.last(),
            "final_grad_norm": report.final_grad_norm,
            "flipped": task.flip_mask.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect::<Vec<_>>(),
        }),
    )?;
    eprintln!(
        "datatk: wrote {} ({} training rows, {} query rows, layer dims {:?})",
        out.display(),
        store.n_train(),
        store.n_query(),
        store.layers().iter().map(|l| l.dim).collect::<Vec<_>>()
    );
    Ok(())
}
