//! Correlation, ranking and summary statistics.

use serde::Serialize;

use super::EvalError;

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(EvalError::TooShort(a.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && a[order[end]] == a[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Probability that a positive's score exceeds a negative's, ties counted
/// as one half (Mann–Whitney form).
pub fn auc(scores: &[f64], positives: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::LengthMismatch {
            left: scores.len(),
            right: positives.len(),
        });
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean, spread and a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub sd: f64,
    pub se: f64,
    /// `1.96 · se`.
    pub ci_half_width: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let m = mean(values);
    let sd = if n > 1 {
        (values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let se = sd / (n as f64).sqrt();
    Some(Summary {
        n,
        mean: m,
        sd,
        se,
        ci_half_width: 1.96 * se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassDetection {
    pub auc: Summary,
    pub recall: Summary,
    pub per_query_auc: Vec<f64>,
    pub per_query_recall: Vec<f64>,
}

/// For each query row: training points of the query's class are positives,
/// AUC is computed on negated scores (most beneficial first), and recall is
/// the share of positives among the `s` most negative scores, `s` being the
/// number of positives.
pub fn class_detection<R: AsRef<[f64]>>(
    score_rows: &[R],
    train_classes: &[usize],
    query_classes: &[usize],
) -> Result<ClassDetection, EvalError> {
    if score_rows.len() != query_classes.len() {
        return Err(EvalError::LengthMismatch {
            left: score_rows.len(),
            right: query_classes.len(),
        });
    }
    if score_rows.is_empty() {
        return Err(EvalError::TooShort(0));
    }
    let mut per_query_auc = Vec::with_capacity(score_rows.len());
    let mut per_query_recall = Vec::with_capacity(score_rows.len());
    for (row, &class) in score_rows.iter().zip(query_classes) {
        let row = row.as_ref();
        if row.len() != train_classes.len() {
            return Err(EvalError::LengthMismatch {
                left: row.len(),
                right: train_classes.len(),
            });
        }
        let same: Vec<bool> = train_classes.iter().map(|&c| c == class).collect();
        let s = same.iter().filter(|&&x| x).count();
        if s == 0 {
            return Err(EvalError::UnknownClass(class));
        }
        let negated: Vec<f64> = row.iter().map(|x| -x).collect();
        per_query_auc.push(auc(&negated, &same)?);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&i, &j| row[i].total_cmp(&row[j]).then(i.cmp(&j)));
        let hits = order[..s].iter().filter(|&&i| same[i]).count();
        per_query_recall.push(hits as f64 / s as f64);
    }
    Ok(ClassDetection {
        auc: summarize(&per_query_auc).expect("non-empty"),
        recall: summarize(&per_query_recall).expect("non-empty"),
        per_query_auc,
        per_query_recall,
    })
}
