use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_pairs(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut c = Self::new(k);
        for (&g, &p) in truth.iter().zip(predicted) {
            if g >= k || p >= k {
                return Err(Error::Validation {
                    what: "label",
                    reason: format!("class out of range for K = {k}"),
                });
            }
            c.counts[g][p] += 1;
        }
        Ok(c)
    }

    pub fn class_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Diagonal normalized by row totals; classes without samples score 0.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect()
    }

    /// Mean of the normalized diagonal over classes present in the data.
    pub fn mean_accuracy(&self) -> f64 {
        let totals = self.class_totals();
        let acc = self.per_class_accuracy();
        let present: Vec<f64> = acc
            .iter()
            .zip(&totals)
            .filter(|(_, &n)| n > 0)
            .map(|(&a, _)| a)
            .collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_normalized_diagonal() {
        let c = Confusion::from_pairs(2, &[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(c.counts, vec![vec![2, 1], vec![0, 1]]);
        assert_eq!(c.class_totals(), vec![3, 1]);
        assert!((c.mean_accuracy() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_trace_over_total() {
        let c = Confusion::from_pairs(3, &[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 0, 2]).unwrap();
        let trace: usize = (0..3).map(|i| c.counts[i][i]).sum();
        assert!((c.mean_accuracy() - trace as f64 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Confusion::from_pairs(2, &[2], &[0]).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
