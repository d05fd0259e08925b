//! Tape-free helpers on plain slices.

use crate::error::{Result, TensorError};
use crate::tape::{LOG_CLIP, SIMPLEX_TOL};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(x)`, max-subtracted.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn is_simplex(p: &[f64], tol: f64) -> bool {
    p.iter().all(|&x| x >= 0.0 && x.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub(crate) fn cross_entropy_unchecked(target: &[f64], predicted: &[f64]) -> f64 {
    -target
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| t * p.max(LOG_CLIP).ln())
        .sum::<f64>()
}

/// `−Σ target·ln(max(predicted, 1e-12))` for two distributions.
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            lhs: vec![target.len()],
            rhs: vec![predicted.len()],
        });
    }
    for (name, p) in [("target", target), ("prediction", predicted)] {
        if !is_simplex(p, SIMPLEX_TOL) {
            return Err(TensorError::Invalid(format!(
                "cross_entropy {name} is not on the simplex"
            )));
        }
    }
    Ok(cross_entropy_unchecked(target, predicted))
}

pub fn one_hot(k: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
