//! Monte Carlo check that the expected loss Hessian equals the expected
//! gradient outer product when labels follow the model's own predictive
//! distribution.
//!
//! For a logistic model `f = wᵀx` the per-example Hessian is
//! `p(1 − p) x xᵀ` whatever the label, and the gradient is `(p − y) x`.
//! With `y ~ Bernoulli(p)`, `(p − y)²` has mean `p(1 − p)` and variance
//! `p(1 − p)(1 − 2p)²`, which gives the standard errors used below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{sigmoid, Architecture, LabModel};
use super::task::SyntheticTask;
use super::LabError;
use crate::store::RowMatrix;

/// `max_z` above this flags a violation.
pub const BARTLETT_Z_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Resample labels from the model's predictive distribution.
    Model,
    /// Use the task's training labels as they are (one draw).
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BartlettReport {
    pub label_source: LabelSource,
    pub mc_samples: usize,
    /// `n⁻¹ Σ_i p_i(1 − p_i) x_i x_iᵀ`, `p × p`.
    pub hessian_mc: RowMatrix,
    /// Mean of `n⁻¹ Σ_i (p_i − y_i)² x_i x_iᵀ` over label draws.
    pub gram_mc: RowMatrix,
    pub max_abs_diff: f64,
    /// Standard error of each `gram_mc` entry under the model.
    pub standard_error: RowMatrix,
    /// Largest `|gram − hessian| / se` over entries with positive `se`.
    pub max_z: f64,
    pub violation: bool,
}

pub fn bartlett_check(
    model: &LabModel,
    task: &SyntheticTask,
    mc_samples: usize,
    source: LabelSource,
    seed: u64,
) -> Result<BartlettReport, LabError> {
    if model.spec.architecture != Architecture::Logistic {
        return Err(LabError::InvalidConfig(
            "the Bartlett check needs the logistic architecture".into(),
        ));
    }
    let draws = match source {
        LabelSource::Model => {
            if mc_samples == 0 {
                return Err(LabError::InvalidConfig("mc_samples must be positive".into()));
            }
            mc_samples
        }
        LabelSource::Observed => 1,
    };
    let n = task.n_train();
    let p = model.input_dim();
    let probs: Vec<f64> = (0..n)
        .map(|i| sigmoid(model.logit(task.features.row(i))))
        .collect();

    // Per-example weight (p_i − y)² averaged over draws.
    let mut weight = vec![0.0; n];
    match source {
        LabelSource::Model => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..draws {
                for (w, &pi) in weight.iter_mut().zip(&probs) {
                    let y = if rng.random::<f64>() < pi { 1.0 } else { 0.0 };
                    *w += (pi - y) * (pi - y);
                }
            }
            weight.iter_mut().for_each(|w| *w /= draws as f64);
        }
        LabelSource::Observed => {
            for ((w, &pi), &y) in weight.iter_mut().zip(&probs).zip(&task.labels) {
                let y = if y { 1.0 } else { 0.0 };
                *w = (pi - y) * (pi - y);
            }
        }
    }

    let mut hessian = RowMatrix::zeros(p, p);
    let mut gram = RowMatrix::zeros(p, p);
    let mut variance = RowMatrix::zeros(p, p);
    let nf = n as f64;
    for i in 0..n {
        let x = task.features.row(i);
        let pi = probs[i];
        let h = pi * (1.0 - pi);
        let var = h * (1.0 - 2.0 * pi).powi(2);
        for r in 0..p {
            for s in 0..p {
                let xx = x[r] * x[s];
                hessian.row_mut(r)[s] += h * xx / nf;
                gram.row_mut(r)[s] += weight[i] * xx / nf;
                variance.row_mut(r)[s] += var * xx * xx / (nf * nf);
            }
        }
    }
    let standard_error = RowMatrix::from_vec(
        p,
        p,
        variance
            .as_slice()
            .iter()
            .map(|v| (v / draws as f64).sqrt())
            .collect(),
    );
    let mut max_abs_diff = 0.0f64;
    let mut max_z = 0.0f64;
    for ((g, h), se) in gram
        .as_slice()
        .iter()
        .zip(hessian.as_slice())
        .zip(standard_error.as_slice())
    {
        let diff = (g - h).abs();
        max_abs_diff = max_abs_diff.max(diff);
        if *se > 0.0 {
            max_z = max_z.max(diff / se);
        } else if diff > 0.0 {
            max_z = f64::INFINITY;
        }
    }
    Ok(BartlettReport {
        label_source: source,
        mc_samples: draws,
        hessian_mc: hessian,
        gram_mc: gram,
        max_abs_diff,
        standard_error,
        max_z,
        violation: max_z > BARTLETT_Z_THRESHOLD,
    })
}
