//! Two-Gaussian binary classification tasks and label noise injection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabError;
use crate::store::RowMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Feature dimension.
    pub p: usize,
    /// Euclidean distance between the two class means, in units of the
    /// per-coordinate noise standard deviation.
    pub separation: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.n_train < 4 || !self.n_train.is_multiple_of(2) {
            return Err(LabError::InvalidTask(format!(
                "n_train must be even and at least 4, got {}",
                self.n_train
            )));
        }
        if self.n_test < 2 || !self.n_test.is_multiple_of(2) {
            return Err(LabError::InvalidTask(format!(
                "n_test must be even and at least 2, got {}",
                self.n_test
            )));
        }
        if self.p == 0 {
            return Err(LabError::InvalidTask("feature dimension must be positive".into()));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(LabError::InvalidTask(format!(
                "separation must be finite and non-negative, got {}",
                self.separation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub seed: u64,
    pub features: RowMatrix,
    /// Training labels as seen by the learner (possibly flipped).
    pub labels: Vec<bool>,
    pub test_features: RowMatrix,
    pub test_labels: Vec<bool>,
    /// `true` where the training label was flipped by [`flip_labels`].
    pub flip_mask: Vec<bool>,
}

impl SyntheticTask {
    pub fn n_train(&self) -> usize {
        self.labels.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.p
    }

    pub fn n_flipped(&self) -> usize {
        self.flip_mask.iter().filter(|&&f| f).count()
    }

    /// Training labels before any flipping.
    pub fn clean_labels(&self) -> Vec<bool> {
        self.labels
            .iter()
            .zip(&self.flip_mask)
            .map(|(&y, &f)| y ^ f)
            .collect()
    }

    /// The task restricted to the listed training rows, in the given order.
    /// The test split is shared.
    pub fn subset(&self, indices: &[usize]) -> SyntheticTask {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.features.row(i)).collect();
        SyntheticTask {
            spec: TaskSpec {
                n_train: indices.len(),
                ..self.spec
            },
            seed: self.seed,
            features: RowMatrix::from_rows(&rows),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            test_features: self.test_features.clone(),
            test_labels: self.test_labels.clone(),
            flip_mask: indices.iter().map(|&i| self.flip_mask[i]).collect(),
        }
    }
}

fn class_means(spec: &TaskSpec) -> [Vec<f64>; 2] {
    let p = spec.p;
    if p == 1 {
        let h = spec.separation / 2.0;
        return [vec![-h], vec![h]];
    }
    // Orthogonal unit directions on disjoint coordinate halves, scaled so
    // the means are `separation` apart.
    let split = p / 2;
    let scale = spec.separation / 2f64.sqrt();
    let mut m0 = vec![0.0; p];
    let mut m1 = vec![0.0; p];
    m0[..split].fill(scale / (split as f64).sqrt());
    m1[split..].fill(scale / ((p - split) as f64).sqrt());
    [m0, m1]
}

fn draw_split(rng: &mut ChaCha8Rng, n: usize, means: &[Vec<f64>; 2]) -> (RowMatrix, Vec<bool>) {
    let p = means[0].len();
    let mut x = RowMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2 == 1;
        let mean = &means[label as usize];
        for (v, m) in x.row_mut(i).iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(rng);
            *v = m + z;
        }
        y.push(label);
    }
    (x, y)
}

/// Classes alternate by index (even rows are class 0) and are drawn from
/// `N(μ_c, I)`. For `p ≥ 2` the two means point along orthogonal
/// directions (the first and second half of the coordinates); for `p = 1`
/// they are `±separation / 2`. Either way they are `separation` apart.
pub fn generate_task(seed: u64, spec: TaskSpec) -> Result<SyntheticTask, LabError> {
    spec.validate()?;
    let means = class_means(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, labels) = draw_split(&mut rng, spec.n_train, &means);
    let (test_features, test_labels) = draw_split(&mut rng, spec.n_test, &means);
    Ok(SyntheticTask {
        spec,
        seed,
        features,
        flip_mask: vec![false; labels.len()],
        labels,
        test_features,
        test_labels,
    })
}

/// Flips exactly `round(noise_rate · n)` training labels chosen by seeded
/// sampling without replacement. The mask is combined by XOR, so applying
/// the same flip twice restores the original task.
pub fn flip_labels(task: &SyntheticTask, noise_rate: f64, seed: u64) -> Result<SyntheticTask, LabError> {
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(LabError::InvalidTask(format!(
            "noise rate must be in [0, 1), got {noise_rate}"
        )));
    }
    let n = task.n_train();
    let count = (noise_rate * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = task.clone();
    for i in sample(&mut rng, n, count) {
        out.labels[i] = !out.labels[i];
        out.flip_mask[i] = !out.flip_mask[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> TaskSpec {
        TaskSpec {
            n_train: n,
            n_test: 4,
            p: 3,
            separation: 2.0,
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_task(7, spec(10)).unwrap();
        let b = generate_task(7, spec(10)).unwrap();
        assert_eq!(a, b);
        let c = generate_task(8, spec(10)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn rejects_odd_or_tiny() {
        assert!(generate_task(0, spec(5)).is_err());
        assert!(generate_task(0, spec(2)).is_err());
    }

    #[test]
    fn class_means_are_separated() {
        let t = generate_task(
            3,
            TaskSpec {
                n_train: 4000,
                n_test: 2,
                p: 4,
                separation: 3.0,
            },
        )
        .unwrap();
        let mut diff = [0.0; 4];
        for i in 0..t.n_train() {
            let sign = if t.labels[i] { 1.0 } else { -1.0 };
            for (d, x) in diff.iter_mut().zip(t.features.row(i)) {
                *d += sign * x / 2000.0;
            }
        }
        let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((dist - 3.0).abs() < 0.15, "{dist}");
    }

    #[test]
    fn flip_counts() {
        let t = generate_task(1, spec(10)).unwrap();
        let f = flip_labels(&t, 0.2, 5).unwrap();
        assert_eq!(f.n_flipped(), 2);
        let changed = t.labels.iter().zip(&f.labels).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
        assert_eq!(f.clean_labels(), t.labels);

        let z = flip_labels(&t, 0.0, 5).unwrap();
        assert_eq!(z, t);

        let back = flip_labels(&f, 0.2, 5).unwrap();
        assert_eq!(back.labels, t.labels);
        assert_eq!(back.n_flipped(), 0);
        assert!(flip_labels(&t, 1.0, 0).is_err());
    }
}
