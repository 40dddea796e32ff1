//! Confusion matrices and derived classification metrics.

use serde::{Deserialize, Serialize};

use super::ProbeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// `confusion[true][predicted]`. Undefined ratios (zero denominators) are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self, ProbeError> {
        let n = confusion.len();
        if n < 2 || confusion.iter().any(|r| r.len() != n) {
            return Err(ProbeError::Config("confusion matrix must be square with ≥ 2 classes".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(ProbeError::Empty);
        }
        let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..n)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
                let actual: u64 = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, actual);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: actual,
                }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n as f64;
        Ok(Self {
            confusion,
            total,
            correct,
            accuracy: ratio(correct, total),
            per_class,
            macro_f1,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self, ProbeError> {
        if truth.len() != predicted.len() {
            return Err(ProbeError::LengthMismatch {
                features: predicted.len(),
                labels: truth.len(),
            });
        }
        if truth.is_empty() {
            return Err(ProbeError::Empty);
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(ProbeError::BadLabel {
                    label: t.max(p),
                    n_classes,
                });
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    /// Binary precision/recall/F1 of the positive class (index 1).
    pub fn positive(&self) -> &ClassMetrics {
        &self.per_class[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_table() {
        let m = Metrics::from_confusion(vec![vec![741, 225], vec![267, 760]]).unwrap();
        assert_eq!(m.correct, 1501);
        assert_eq!(m.total, 1993);
        assert!((m.accuracy * 100.0 - 75.3).abs() < 0.05);
        assert!((m.positive().precision - 760.0 / 985.0).abs() < 1e-12);
        assert!((m.positive().recall - 760.0 / 1027.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor() {
        let truth = vec![0, 1, 2, 2, 1];
        let m = Metrics::from_predictions(&truth, &truth, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(Metrics::from_predictions(&[], &[], 2), Err(ProbeError::Empty)));
        assert!(Metrics::from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = Metrics::from_predictions(&[0, 0, 1], &[0, 0, 0], 2).unwrap();
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
    }
}
