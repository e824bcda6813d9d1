mod common;

use common::mean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use datatk::eval::{
    auc, class_detection, run_mislabel_experiment, run_selection_experiment, ExperimentConfig,
    Status,
};
use datatk::influence::{retraining_scores, SubsetPlan, SubsetTrainer};
use datatk::lab::{
    bartlett_check, build_model, extract_gradients, flip_labels, generate_task,
    test_accuracy, train, train_subset, LabModel, LabelSource, LocationTask, ModelSpec,
    Pretraining, TaskSpec, TrainConfig,
};

fn spec(separation: f64) -> TaskSpec {
    TaskSpec {
        n_train: 200,
        n_test: 100,
        p: 8,
        separation,
    }
}

fn fitted(seed: u64, separation: f64, noise: f64) -> (datatk::lab::SyntheticTask, LabModel, LabModel) {
    let clean = generate_task(seed, spec(separation)).unwrap();
    let task = flip_labels(&clean, noise, seed + 1000).unwrap();
    let initial = build_model(ModelSpec::mlp(16, 4), &task, seed, &Pretraining::default()).unwrap();
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (model, _) = train(&task, &initial, &config).unwrap();
    (task, initial, model)
}

#[test]
fn indistinguishable_classes_give_chance_accuracy() {
    for seed in 0..20 {
        let (task, _, model) = fitted(seed, 0.0, 0.0);
        let acc = test_accuracy(&model, &task);
        assert!((0.35..=0.65).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn well_separated_classes_are_learned() {
    for seed in 0..5 {
        let (task, _, model) = fitted(seed, 10.0, 0.0);
        let acc = test_accuracy(&model, &task);
        assert!(acc > 0.95, "seed {seed}: {acc}");
    }
}

#[test]
fn extracted_gradients_match_central_differences() {
    let (task, _, model) = fitted(3, 2.0, 0.2);
    let store = extract_gradients(&task, &model).unwrap();
    let h = 1e-5;
    for i in [0, 17, 42, 99, 150, 199] {
        let x = task.features.row(i);
        let y = task.labels[i];
        for l in 0..model.num_layers() {
            let row = store.train_row(l, i);
            for (c, &g) in row.iter().enumerate() {
                let mut plus = model.clone();
                plus.adapters[l].params[c] += h;
                let mut minus = model.clone();
                minus.adapters[l].params[c] -= h;
                let fd = (plus.trace(x, y).loss - minus.trace(x, y).loss) / (2.0 * h);
                let denom = g.abs().max(1e-6);
                assert!((fd - g).abs() / denom < 1e-4, "example {i} layer {l} coord {c}: {fd} vs {g}");
            }
        }
    }
}

#[test]
fn adapter_dims_grow_with_rank() {
    let task = generate_task(0, spec(2.0)).unwrap();
    let mut previous: Option<Vec<usize>> = None;
    for rank in [1, 2, 4, 8] {
        let model = LabModel::init(ModelSpec::mlp(16, rank), 8, 0).unwrap();
        let dims = model.adapter_dims();
        assert_eq!(dims, vec![rank * (8 + 16), rank * (16 + 1)]);
        let store = extract_gradients(&task, &model).unwrap();
        assert_eq!(store.layers().iter().map(|l| l.dim).collect::<Vec<_>>(), dims);
        if let Some(p) = previous {
            assert!(dims.iter().zip(&p).all(|(a, b)| a > b));
        }
        previous = Some(dims);
    }
}

#[test]
fn subset_training_determinism() {
    let (task, initial, _) = fitted(5, 2.0, 0.0);
    let config = TrainConfig {
        seed: 5,
        ..TrainConfig::default()
    };
    let all: Vec<usize> = (0..task.n_train()).collect();
    assert_eq!(
        train_subset(&task, &all, &initial, &config).unwrap().0,
        train(&task, &initial, &config).unwrap().0
    );

    // Rows 0..100 and 100..200 hold the same data after copying.
    let mut doubled = task.clone();
    for i in 0..100 {
        let row = task.features.row(i).to_vec();
        doubled.features.row_mut(100 + i).copy_from_slice(&row);
        doubled.labels[100 + i] = task.labels[i];
    }
    let first: Vec<usize> = (0..100).collect();
    let second: Vec<usize> = (100..200).collect();
    let (a, _) = train_subset(&doubled, &first, &initial, &config).unwrap();
    let (b, _) = train_subset(&doubled, &second, &initial, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn location_fit_matches_closed_form_mean() {
    let t = LocationTask::generate(9, 7).unwrap();
    for subset in [vec![0], vec![1, 4], vec![0, 2, 3, 6]] {
        let closed = mean(&subset.iter().map(|&i| t.values[i]).collect::<Vec<_>>());
        assert!((t.fit(&subset) - closed).abs() < 1e-12);
    }
}

#[test]
fn retraining_matches_hand_enumeration() {
    let t = LocationTask::generate(4, 4).unwrap();
    let scores = retraining_scores(&t, 2, SubsetPlan::Exhaustive).unwrap();
    let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let loss = |a: usize, b: usize| {
        let theta = (t.values[a] + t.values[b]) / 2.0;
        0.5 * (theta - t.target).powi(2)
    };
    for i in 0..4 {
        let with: Vec<f64> = pairs.iter().filter(|p| p.0 == i || p.1 == i).map(|p| loss(p.0, p.1)).collect();
        let without: Vec<f64> = pairs.iter().filter(|p| p.0 != i && p.1 != i).map(|p| loss(p.0, p.1)).collect();
        assert!((scores.get(0, i) - (mean(&with) - mean(&without))).abs() < 1e-10);
    }
}

#[test]
fn duplicated_points_get_equal_retraining_scores() {
    let mut t = LocationTask::generate(2, 6).unwrap();
    t.values[5] = t.values[1];
    assert_eq!(t.n_train(), 6);
    let scores = retraining_scores(&t, 3, SubsetPlan::Exhaustive).unwrap();
    assert!((scores.get(0, 1) - scores.get(0, 5)).abs() < 1e-12);
}

#[test]
fn bartlett_flags_deterministic_labels() {
    let task = generate_task(1, TaskSpec { n_train: 2000, n_test: 2, p: 3, separation: 1.5 }).unwrap();
    let initial = build_model(ModelSpec::logistic(), &task, 1, &Pretraining::default()).unwrap();
    let (model, _) = train(&task, &initial, &TrainConfig { epochs: 50, ..TrainConfig::default() }).unwrap();
    let resampled = bartlett_check(&model, &task, 10_000, LabelSource::Model, 0).unwrap();
    assert!(!resampled.violation, "max z {}", resampled.max_z);

    // Labels set to the model's own argmax are a deterministic function of x.
    let mut hard = task.clone();
    for i in 0..hard.n_train() {
        hard.labels[i] = model.predict_proba(hard.features.row(i)) > 0.5;
    }
    let observed = bartlett_check(&model, &hard, 1, LabelSource::Observed, 0).unwrap();
    assert!(observed.violation, "max z {}", observed.max_z);
}

#[test]
fn random_scores_give_chance_class_detection() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train_classes: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let query_classes: Vec<usize> = (0..400).map(|j| j % 2).collect();
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|_| (0..200).map(|_| rng.random::<f64>()).collect())
        .collect();
    let r = class_detection(&rows, &train_classes, &query_classes).unwrap();
    // Under the null each query AUC has variance (n₁+n₀+1)/(12 n₁ n₀).
    let se = ((201.0) / (12.0 * 100.0 * 100.0) / 400.0f64).sqrt();
    assert!((r.auc.mean - 0.5).abs() < 4.0 * se, "{} vs band {}", r.auc.mean, 4.0 * se);
    let brute = {
        let s = &rows[0];
        let pos: Vec<bool> = train_classes.iter().map(|&c| c == query_classes[0]).collect();
        let neg_scores: Vec<f64> = s.iter().map(|x| -x).collect();
        auc(&neg_scores, &pos).unwrap()
    };
    assert!((r.per_query_auc[0] - brute).abs() < 1e-12);
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: 4,
        ..ExperimentConfig::default()
    }
}

#[test]
fn zero_noise_mislabel_run_skips_auc() {
    let config = ExperimentConfig {
        train: TrainConfig { noise_rate: 0.0, ..TrainConfig::default() },
        ..small_config()
    };
    let report = run_mislabel_experiment(&config).unwrap();
    let auc_records: Vec<_> = report.records.iter().filter(|r| r.metric == "auc").collect();
    assert!(!auc_records.is_empty());
    assert!(auc_records.iter().all(|r| r.status == Status::Skipped && r.value.is_none()));
}

#[test]
fn full_clean_data_beats_random_subset() {
    let config = ExperimentConfig {
        seeds: 20,
        train: TrainConfig { noise_rate: 0.0, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let report = run_selection_experiment(&config).unwrap();
    let last = Some(config.selection_epochs);
    let full = mean(&report.values(4, "full", "test_accuracy", last));
    let random = mean(&report.values(4, "random", "test_accuracy", last));
    assert!(full >= random, "full {full} random {random}");
}

#[test]
fn selecting_everything_reproduces_full_training() {
    let config = ExperimentConfig {
        select_fraction: 1.0,
        ..small_config()
    };
    let report = run_selection_experiment(&config).unwrap();
    for step in 1..=config.selection_epochs {
        assert_eq!(
            report.values(4, "datainf", "test_accuracy", Some(step)),
            report.values(4, "full", "test_accuracy", Some(step))
        );
    }
}

#[test]
fn experiments_are_deterministic_on_one_worker() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let config = small_config();
    let a = pool.install(|| run_mislabel_experiment(&config).unwrap());
    let b = pool.install(|| run_mislabel_experiment(&config).unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.records, b.records);
}

#[test]
fn location_task_trains_through_the_trait() {
    let t = LocationTask::generate(0, 5).unwrap();
    let loss = t.subset_loss(&[0, 2]).unwrap();
    assert!((loss - t.loss((t.values[0] + t.values[2]) / 2.0)).abs() < 1e-12);
}
