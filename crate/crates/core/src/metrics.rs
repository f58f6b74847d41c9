//! Classification metrics over a confusion matrix (rows = ground truth,
//! columns = prediction).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", "row length", k, r.len()));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "confusion matrix",
                "label count",
                truth.len(),
                predicted.len(),
            ));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::invalid(
                "class index",
                format!("({truth}, {predicted}) with {} classes", self.classes),
            ));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        if self.classes == 0 {
            return Vec::new();
        }
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    /// Relabels classes: old class `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.classes];
        if perm.len() != self.classes
            || perm
                .iter()
                .any(|&p| p >= self.classes || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid("permutation", format!("{perm:?}")));
        }
        let mut out = ConfusionMatrix::new(self.classes);
        for t in 0..self.classes {
            for p in 0..self.classes {
                out.counts[perm[t] * self.classes + perm[p]] = self.get(t, p);
            }
        }
        Ok(out)
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::invalid("confusion matrix", "no samples")),
            n => Ok(n as f64),
        }
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty_total()?)
}

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// samples scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty_total()?;
    let k = cm.classes();
    let sum: f64 = (0..k)
        .map(|i| {
            let tp = cm.get(i, i) as f64;
            let denom = (cm.row_sum(i) + cm.col_sum(i)) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    Ok(sum / k as f64)
}

/// Cohen's kappa; 0 when chance agreement is already 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty_total()?;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = (0..cm.classes())
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub cohen_kappa: f64,
    pub confusion: Vec<Vec<u64>>,
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    Ok(MetricsReport {
        accuracy: accuracy(cm)?,
        macro_f1: macro_f1(cm)?,
        cohen_kappa: cohen_kappa(cm)?,
        confusion: cm.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn two_class_fixture() {
        let m = cm(&[&[3, 1], &[1, 3]]);
        assert_eq!(accuracy(&m).unwrap(), 0.75);
        assert!((macro_f1(&m).unwrap() - 0.75).abs() < 1e-12);
        assert!((cohen_kappa(&m).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn extremes() {
        let diag = cm(&[&[2, 0, 0], &[0, 5, 0], &[0, 0, 1]]);
        assert_eq!(accuracy(&diag).unwrap(), 1.0);
        assert_eq!(macro_f1(&diag).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&diag).unwrap(), 1.0);
        let off = cm(&[&[0, 7], &[0, 0]]);
        assert_eq!(accuracy(&off).unwrap(), 0.0);
        assert!(accuracy(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn absent_class_counts_as_zero_f1() {
        let m = cm(&[&[4, 0, 0], &[0, 4, 0], &[0, 0, 0]]);
        assert!((macro_f1(&m).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn independent_prediction_has_zero_kappa() {
        // Outer product of marginals (2, 1) and (1, 3).
        let m = cm(&[&[2, 6], &[1, 3]]);
        assert!(cohen_kappa(&m).unwrap().abs() < 1e-9);
        let degenerate = cm(&[&[5, 0], &[0, 0]]);
        assert_eq!(cohen_kappa(&degenerate).unwrap(), 0.0);
    }
}
