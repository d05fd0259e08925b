//! Classification, regression, multi-task and refining losses. All batch
//! losses are sums over sequences.

use prnn_tensor::{func, Binding, Tape, Tensor, Var};

use crate::config::{ModelConfig, REGRESSION_JOINTS};
use crate::error::{invalid, Error, Result};
use crate::pipeline::data::Sample;
use crate::pipeline::model::{forward, Forward};

fn one_hot_row(k: usize, label: usize) -> Result<Tensor> {
    if label >= k {
        return invalid("label", format!("class {label} out of range for K = {k}"));
    }
    Ok(Tensor::new(&[1, k], func::one_hot(k, label))?)
}

/// `−ln p_g` of a final-frame distribution (log clipped at 1e-12).
pub fn classification_loss(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return invalid("label", format!("class {label} out of range for K = {}", probs.len()));
    }
    Ok(func::cross_entropy(&func::one_hot(probs.len(), label), probs)?)
}

/// Tape version of [`classification_loss`] on a `[1, K]` distribution.
pub fn classification_term(tape: &Tape, probs: Var, label: usize) -> Result<Var> {
    let k = tape.shape(probs)[1];
    Ok(tape.cross_entropy(&one_hot_row(k, label)?, probs)?)
}

/// `(1/S) Σ_s (Δx² + Δy²)` for one frame.
pub fn regression_loss(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} target keypoints", pred.len(), target.len())));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Per-frame regression loss summed over the sequence, for `[T, 12]`
/// predictions and targets.
pub fn regression_term(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(t, pred)?;
    let sq = tape.sum(tape.mul(diff, diff)?);
    Ok(tape.scale(sq, 1.0 / REGRESSION_JOINTS as f64))
}

/// `L^c(T) + λ Σ_t L^r(t)` for one sequence.
pub fn multitask_term(tape: &Tape, fwd: &Forward, sample: &Sample, lambda: f64) -> Result<Var> {
    let cls = classification_term(tape, fwd.final_probs(tape)?, sample.label)?;
    if lambda == 0.0 {
        return Ok(cls);
    }
    let pred = fwd
        .regression
        .ok_or_else(|| Error::Shape("regression head missing".into()))?;
    let target = sample.targets.as_ref().ok_or_else(|| Error::Validation {
        what: "sample",
        reason: format!("{} has no regression targets", sample.id),
    })?;
    let reg = regression_term(tape, pred, target)?;
    Ok(tape.add(cls, tape.scale(reg, lambda))?)
}

/// `CE(û, p(y_T)) + β·CE(one_hot(g), softmax(y′))` for one sequence.
pub fn refining_term(tape: &Tape, fwd: &Forward, target: &[f64], label: usize, beta: f64) -> Result<Var> {
    let probs = fwd.final_probs(tape)?;
    let k = tape.shape(probs)[1];
    let target = Tensor::new(&[1, k], target.to_vec())?;
    let primary = tape.cross_entropy(&target, probs)?;
    if beta == 0.0 {
        return Ok(primary);
    }
    let sec = fwd
        .sec_probs
        .ok_or_else(|| Error::Shape("secondary head missing".into()))?;
    let secondary = classification_term(tape, sec, label)?;
    Ok(tape.add(primary, tape.scale(secondary, beta))?)
}

fn sum_terms(tape: &Tape, terms: Vec<Var>) -> Result<Var> {
    let mut iter = terms.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Validation {
            what: "batch",
            reason: "empty".into(),
        })?;
    iter.try_fold(first, |acc, t| Ok(tape.add(acc, t)?))
}

/// Multi-task loss summed over a batch, on a single tape.
pub fn multitask_loss(tape: &Tape, params: &Binding, cfg: &ModelConfig, batch: &[Sample], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return invalid("lambda", format!("{lambda} < 0"));
    }
    let terms = batch
        .iter()
        .map(|s| {
            let frames = tape.constant(s.frames.clone());
            let fwd = forward(tape, params, cfg, frames, None)?;
            multitask_term(tape, &fwd, s, lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_terms(tape, terms)
}

/// Refining loss summed over a batch with one sampled target per sequence.
pub fn refining_loss(
    tape: &Tape,
    params: &Binding,
    cfg: &ModelConfig,
    batch: &[Sample],
    targets: &[Vec<f64>],
    beta: f64,
) -> Result<Var> {
    if batch.len() != targets.len() {
        return Err(Error::Shape(format!("{} sequences vs {} targets", batch.len(), targets.len())));
    }
    let terms = batch
        .iter()
        .zip(targets)
        .map(|(s, u)| {
            let frames = tape.constant(s.frames.clone());
            let fwd = forward(tape, params, cfg, frames, None)?;
            refining_term(tape, &fwd, u, s.label, beta)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_terms(tape, terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_cases() {
        assert!((classification_loss(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(classification_loss(&[0.0, 1.0], 1).unwrap() <= 1e-11);
        let l = classification_loss(&[0.1, 0.9], 1).unwrap();
        assert!((l - 0.10536).abs() < 1e-5);
        assert!(classification_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn regression_cases() {
        let t = [[0.1, -0.2]; 6];
        assert_eq!(regression_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<[f64; 2]> = t.iter().map(|p| [p[0] + 0.1, p[1]]).collect();
        assert!((regression_loss(&shifted, &t).unwrap() - 0.01).abs() < 1e-15);
        assert!(regression_loss(&t[..5], &t).is_err());
    }
}
