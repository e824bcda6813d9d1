//! Small feed-forward classifiers with frozen base weights and trainable
//! adapters, plus per-example backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// `ΔW = B A` with `B: out × r` and `A: r × in`.
    LowRank,
    /// `ΔW` trained directly.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// `p → hidden → 1` with a tanh hidden layer; both layers are adapted.
    Mlp { hidden: usize },
    /// A single linear layer `p → 1`; the base weight is zero, so training
    /// the adapter is logistic regression.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub adapter: AdapterKind,
    pub rank: usize,
}

impl ModelSpec {
    pub fn mlp(hidden: usize, rank: usize) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden },
            adapter: AdapterKind::LowRank,
            rank,
        }
    }

    pub fn logistic() -> Self {
        Self {
            architecture: Architecture::Logistic,
            adapter: AdapterKind::Dense,
            rank: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_out × d_in`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn zeros(d_in: usize, d_out: usize, activation: Activation) -> Self {
        Self {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
            activation,
        }
    }
}

/// Trainable parameters attached to one base layer.
///
/// Flat layouts:
/// * low rank: `[A (r × in) | B (out × r)]`, both row-major;
/// * dense: `ΔWᵀ` row-major (`in × out`), so entry `i * out + o` multiplies
///   input `i` into output `o` and a per-example gradient is `input ⊗ δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub kind: AdapterKind,
    pub rank: usize,
    pub params: Vec<f64>,
}

/// One forward/backward pass for a single example.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Gradient of the loss with respect to each layer's pre-activation.
    pub deltas: Vec<Vec<f64>>,
    pub logit: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabModel {
    pub spec: ModelSpec,
    pub base: Vec<DenseLayer>,
    pub adapters: Vec<Adapter>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary negative log-likelihood of a logit: `softplus(z) − y z`.
pub fn nll(logit: f64, label: bool) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    if label {
        softplus - logit
    } else {
        softplus
    }
}

fn label_value(label: bool) -> f64 {
    if label {
        1.0
    } else {
        0.0
    }
}

impl LabModel {
    /// Base weights drawn from `N(0, 1/d_in)` (zero for the logistic
    /// architecture), zero biases, and adapters whose product is zero:
    /// low-rank `A` is drawn from `N(0, 1/d_in)` with `B = 0`, dense
    /// adapters start at zero.
    pub fn init(spec: ModelSpec, input_dim: usize, seed: u64) -> Result<Self, LabError> {
        if input_dim == 0 {
            return Err(LabError::InvalidConfig("input dimension must be positive".into()));
        }
        if spec.rank == 0 {
            return Err(LabError::InvalidConfig("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = match spec.architecture {
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(LabError::InvalidConfig("hidden width must be positive".into()));
                }
                let mut l1 = DenseLayer::zeros(input_dim, hidden, Activation::Tanh);
                let mut l2 = DenseLayer::zeros(hidden, 1, Activation::Identity);
                for layer in [&mut l1, &mut l2] {
                    let normal = Normal::new(0.0, (1.0 / layer.d_in as f64).sqrt()).unwrap();
                    layer.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
                }
                vec![l1, l2]
            }
            Architecture::Logistic => vec![DenseLayer::zeros(input_dim, 1, Activation::Identity)],
        };
        let adapters = base
            .iter()
            .map(|layer| match spec.adapter {
                AdapterKind::Dense => Adapter {
                    kind: AdapterKind::Dense,
                    rank: 0,
                    params: vec![0.0; layer.d_in * layer.d_out],
                },
                AdapterKind::LowRank => {
                    let r = spec.rank;
                    let normal = Normal::new(0.0, (1.0 / layer.d_in as f64).sqrt()).unwrap();
                    let mut params = vec![0.0; r * (layer.d_in + layer.d_out)];
                    params[..r * layer.d_in]
                        .iter_mut()
                        .for_each(|a| *a = normal.sample(&mut rng));
                    Adapter {
                        kind: AdapterKind::LowRank,
                        rank: r,
                        params,
                    }
                }
            })
            .collect();
        Ok(Self {
            spec,
            base,
            adapters,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.base.len()
    }

    pub fn input_dim(&self) -> usize {
        self.base[0].d_in
    }

    /// Trainable parameter count of each adapted layer.
    pub fn adapter_dims(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.params.len()).collect()
    }

    /// `(d_in, d_out)` of each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.base.iter().map(|l| (l.d_in, l.d_out)).collect()
    }

    /// Effective weight of layer `l`, `W + ΔW`, as `d_out × d_in` row-major.
    pub fn effective_weight(&self, l: usize) -> Vec<f64> {
        let layer = &self.base[l];
        let (d_in, d_out) = (layer.d_in, layer.d_out);
        let mut w = layer.weight.clone();
        let adapter = &self.adapters[l];
        match adapter.kind {
            AdapterKind::Dense => {
                for i in 0..d_in {
                    for o in 0..d_out {
                        w[o * d_in + i] += adapter.params[i * d_out + o];
                    }
                }
            }
            AdapterKind::LowRank => {
                let r = adapter.rank;
                let (a, b) = adapter.params.split_at(r * d_in);
                for o in 0..d_out {
                    for k in 0..r {
                        let bok = b[o * r + k];
                        if bok == 0.0 {
                            continue;
                        }
                        for i in 0..d_in {
                            w[o * d_in + i] += bok * a[k * d_in + i];
                        }
                    }
                }
            }
        }
        w
    }

    pub fn effective_weights(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers()).map(|l| self.effective_weight(l)).collect()
    }

    /// Logit of one input given precomputed effective weights.
    pub fn logit_with(&self, weights: &[Vec<f64>], x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for (layer, w) in self.base.iter().zip(weights) {
            a = layer_forward(layer, w, &a);
        }
        a[0]
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.logit_with(&self.effective_weights(), x)
    }

    pub fn trace_with(&self, weights: &[Vec<f64>], x: &[f64], label: bool) -> Trace {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut a = x.to_vec();
        for (layer, w) in self.base.iter().zip(weights) {
            let next = layer_forward(layer, w, &a);
            inputs.push(a);
            a = next;
        }
        let logit = a[0];
        let mut deltas = vec![Vec::new(); self.num_layers()];
        let mut delta = vec![sigmoid(logit) - label_value(label)];
        for l in (0..self.num_layers()).rev() {
            if l > 0 {
                let layer = &self.base[l];
                let w = &weights[l];
                let prev = &self.base[l - 1];
                let mut back = vec![0.0; layer.d_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &w[o * layer.d_in..(o + 1) * layer.d_in];
                    for (b, wi) in back.iter_mut().zip(row) {
                        *b += wi * d;
                    }
                }
                if prev.activation == Activation::Tanh {
                    for (b, h) in back.iter_mut().zip(&inputs[l]) {
                        *b *= 1.0 - h * h;
                    }
                }
                deltas[l] = std::mem::replace(&mut delta, back);
            } else {
                deltas[0] = std::mem::take(&mut delta);
            }
        }
        Trace {
            inputs,
            deltas,
            logit,
            loss: nll(logit, label),
        }
    }

    pub fn trace(&self, x: &[f64], label: bool) -> Trace {
        self.trace_with(&self.effective_weights(), x, label)
    }

    /// Flattened adapter gradient of layer `l` from a trace.
    pub fn adapter_gradient(&self, trace: &Trace, l: usize) -> Vec<f64> {
        let layer = &self.base[l];
        let adapter = &self.adapters[l];
        let input = &trace.inputs[l];
        let delta = &trace.deltas[l];
        match adapter.kind {
            AdapterKind::Dense => {
                let mut g = Vec::with_capacity(layer.d_in * layer.d_out);
                for x in input {
                    g.extend(delta.iter().map(|d| x * d));
                }
                g
            }
            AdapterKind::LowRank => {
                let (r, d_in, d_out) = (adapter.rank, layer.d_in, layer.d_out);
                let (a, b) = adapter.params.split_at(r * d_in);
                let mut g = vec![0.0; adapter.params.len()];
                let (ga, gb) = g.split_at_mut(r * d_in);
                for k in 0..r {
                    let u: f64 = (0..d_out).map(|o| b[o * r + k] * delta[o]).sum();
                    let ak = &a[k * d_in..(k + 1) * d_in];
                    let w: f64 = ak.iter().zip(input).map(|(x, y)| x * y).sum();
                    for (gi, x) in ga[k * d_in..(k + 1) * d_in].iter_mut().zip(input) {
                        *gi = u * x;
                    }
                    for o in 0..d_out {
                        gb[o * r + k] = delta[o] * w;
                    }
                }
                g
            }
        }
    }

    /// Per-layer adapter gradients of one example's loss.
    pub fn example_gradients(&self, x: &[f64], label: bool) -> Vec<Vec<f64>> {
        let trace = self.trace(x, label);
        (0..self.num_layers())
            .map(|l| self.adapter_gradient(&trace, l))
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

fn layer_forward(layer: &DenseLayer, w: &[f64], a: &[f64]) -> Vec<f64> {
    (0..layer.d_out)
        .map(|o| {
            let row = &w[o * layer.d_in..(o + 1) * layer.d_in];
            let z = layer.bias[o] + row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            match layer.activation {
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            }
        })
        .collect()
}
