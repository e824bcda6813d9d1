//! Independent reference implementations used as test oracles. Everything
//! here works on plain `Vec`s and avoids the crate's linear algebra.

#![allow(dead_code)]

use datatk::store::{DampingVector, GradientStore, ValidationAggregate};

pub type Dense = Vec<Vec<f64>>;

/// Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &Dense) -> Dense {
    let n = m.len();
    let mut a: Dense = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        a[col].iter_mut().for_each(|x| *x /= p);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    for (x, p) in a[r].iter_mut().zip(&pivot_row) {
                        *x -= f * p;
                    }
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn mat_vec(m: &Dense, v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn mat_mul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Dense) -> Dense {
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `g gᵀ + λ I`.
pub fn damped_outer(g: &[f64], lambda: f64) -> Dense {
    (0..g.len())
        .map(|i| {
            (0..g.len())
                .map(|j| g[i] * g[j] + if i == j { lambda } else { 0.0 })
                .collect()
        })
        .collect()
}

/// `n⁻¹ Σ_i ∇ℓ_i ∇ℓ_iᵀ + λ I` for one layer.
pub fn damped_gram(store: &GradientStore, layer: usize, lambda: f64) -> Dense {
    let d = store.dim(layer);
    let n = store.n_train() as f64;
    let mut m = vec![vec![0.0; d]; d];
    for g in store.train(layer).iter_rows() {
        for i in 0..d {
            for j in 0..d {
                m[i][j] += g[i] * g[j] / n;
            }
        }
    }
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += lambda;
    }
    m
}

fn scores_from(store: &GradientStore, r: &[Vec<f64>]) -> Vec<f64> {
    (0..store.n_train())
        .map(|k| {
            -(0..store.num_layers())
                .map(|l| vdot(&r[l], store.train_row(l, k)))
                .sum::<f64>()
        })
        .collect()
}

/// Scores with the exact inverse of the damped Gram matrix.
pub fn exact_oracle(store: &GradientStore, query: &ValidationAggregate, damping: &DampingVector) -> Vec<f64> {
    let r: Vec<Vec<f64>> = (0..store.num_layers())
        .map(|l| {
            let inv = gauss_jordan_inverse(&damped_gram(store, l, damping.get(l)));
            mat_vec(&inv, query.layer(l))
        })
        .collect();
    scores_from(store, &r)
}

/// Scores with the average of the per-example damped inverses, each inverted
/// densely.
pub fn average_of_inverses_oracle(
    store: &GradientStore,
    query: &ValidationAggregate,
    damping: &DampingVector,
) -> Vec<f64> {
    let n = store.n_train() as f64;
    let r: Vec<Vec<f64>> = (0..store.num_layers())
        .map(|l| {
            let d = store.dim(l);
            let mut acc = vec![0.0; d];
            for g in store.train(l).iter_rows() {
                let inv = gauss_jordan_inverse(&damped_outer(g, damping.get(l)));
                for (a, x) in acc.iter_mut().zip(mat_vec(&inv, query.layer(l))) {
                    *a += x / n;
                }
            }
            acc
        })
        .collect();
    scores_from(store, &r)
}

pub fn hessian_free_oracle(store: &GradientStore, query: &ValidationAggregate) -> Vec<f64> {
    let r: Vec<Vec<f64>> = query.layers().to_vec();
    scores_from(store, &r)
}

/// Dense Kronecker product, `(A ⊗ B)[p·b + q][r·b + s] = A[p][r] B[q][s]`.
pub fn kron(a: &Dense, b: &Dense) -> Dense {
    let (ar, ac) = (a.len(), a[0].len());
    let (br, bc) = (b.len(), b[0].len());
    let mut out = vec![vec![0.0; ac * bc]; ar * br];
    for p in 0..ar {
        for q in 0..br {
            for r in 0..ac {
                for s in 0..bc {
                    out[p * br + q][r * bc + s] = a[p][r] * b[q][s];
                }
            }
        }
    }
    out
}

/// `max |a − b| / max |b|`, or the absolute difference when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst per-entry relative error `|a_k − b_k| / |b_k|`.
pub fn pointwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if *y == 0.0 {
                x.abs()
            } else {
                (x - y).abs() / y.abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
