//! Confusion matrices, balanced accuracy and support-weighted precision and
//! recall.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label sequences differ in length ({truth} vs {predicted})")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} at position {index} is outside 0..{k}")]
    LabelOutOfRange { index: usize, label: usize, k: usize },
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid matrix: {0}")]
    Shape(String),
}

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::Shape("counts must be a non-empty square matrix".into()));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    /// Support `n_i` of class `i` (row sum).
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn predicted_total(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    fn require_supports(&self) -> Result<(), MetricsError> {
        match (0..self.k).find(|&i| self.support(i) == 0) {
            Some(i) => Err(MetricsError::Undefined(format!("class {i} has no samples"))),
            None => Ok(()),
        }
    }

    /// `TP_i / n_i` for every class.
    pub fn recalls(&self) -> Result<Vec<f64>, MetricsError> {
        self.require_supports()?;
        Ok((0..self.k).map(|i| self.counts[i][i] as f64 / self.support(i) as f64).collect())
    }

    /// `TP_i / predicted_i`, with 0 for classes never predicted. The second
    /// vector lists those classes.
    pub fn precisions(&self) -> (Vec<f64>, Vec<usize>) {
        let mut undefined = Vec::new();
        let p = (0..self.k)
            .map(|j| match self.predicted_total(j) {
                0 => {
                    undefined.push(j);
                    0.0
                }
                col => self.counts[j][j] as f64 / col as f64,
            })
            .collect();
        (p, undefined)
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    if k == 0 {
        return Err(MetricsError::Shape("k must be at least 1".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (index, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        for label in [t, p] {
            if label >= k {
                return Err(MetricsError::LabelOutOfRange { index, label, k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

/// Mean over classes of `TP_i / (TP_i + FN_i)`.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let r = cm.recalls()?;
    Ok(r.iter().sum::<f64>() / cm.k as f64)
}

/// `sum n_i P_i / sum n_i`.
pub fn weighted_precision(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Undefined("empty confusion matrix".into()));
    }
    let (p, _) = cm.precisions();
    Ok((0..cm.k).map(|i| cm.support(i) as f64 * p[i]).sum::<f64>() / total as f64)
}

/// `sum n_i R_i / sum n_i`, which equals plain accuracy.
pub fn weighted_recall(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let r = cm.recalls()?;
    Ok((0..cm.k).map(|i| cm.support(i) as f64 * r[i]).sum::<f64>() / cm.total() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub balanced_accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub support: Vec<u64>,
    /// Classes that were never predicted; their precision is reported as 0.
    pub undefined_precision: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self, MetricsError> {
        let (precision, undefined_precision) = cm.precisions();
        Ok(Self {
            balanced_accuracy: balanced_accuracy(&cm)?,
            weighted_precision: weighted_precision(&cm)?,
            weighted_recall: weighted_recall(&cm)?,
            recall: cm.recalls()?,
            precision,
            support: (0..cm.k).map(|i| cm.support(i)).collect(),
            undefined_precision,
            confusion: cm,
        })
    }

    /// `label | BA | precision | recall`, as percentages with one decimal.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{:<20} {:>6.1} {:>10.1} {:>7.1}",
            label,
            100.0 * self.balanced_accuracy,
            100.0 * self.weighted_precision,
            100.0 * self.weighted_recall
        )
    }
}

pub fn table_header() -> String {
    format!("{:<20} {:>6} {:>10} {:>7}", "Preprocessing", "BA", "Precision", "Recall")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let y = [0, 1, 2, 1, 0];
        let c = confusion_matrix(&y, &y, 3).unwrap();
        assert_eq!(c.counts(), &[vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let c = confusion_matrix(&y, &[0; 5], 3).unwrap();
        assert_eq!(c.counts(), &[vec![2, 0, 0], vec![2, 0, 0], vec![1, 0, 0]]);
        assert_eq!(
            confusion_matrix(&[0, 3], &[0, 0], 3),
            Err(MetricsError::LabelOutOfRange { index: 1, label: 3, k: 3 })
        );
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 3), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn balanced_accuracy_examples() {
        let perfect = cm(&[&[744, 0, 0], &[0, 830, 0], &[0, 0, 668]]);
        assert_eq!(balanced_accuracy(&perfect).unwrap(), 1.0);
        let mixed = cm(&[&[4, 0, 0], &[1, 1, 0], &[0, 3, 0]]);
        assert!((balanced_accuracy(&mixed).unwrap() - 0.5).abs() < 1e-15);
        let two = cm(&[&[8, 2], &[4, 6]]);
        assert!((balanced_accuracy(&two).unwrap() - 0.7).abs() < 1e-15);
        let empty_class = cm(&[&[3, 0], &[0, 0]]);
        assert!(matches!(balanced_accuracy(&empty_class), Err(MetricsError::Undefined(_))));
    }

    #[test]
    fn weighted_precision_examples() {
        let c = cm(&[&[5, 5], &[0, 10]]);
        let expect = (10.0 * 1.0 + 10.0 * (10.0 / 15.0)) / 20.0;
        assert!((weighted_precision(&c).unwrap() - expect).abs() < 1e-15);
        assert!((weighted_precision(&c).unwrap() - 0.8333).abs() < 1e-4);
        assert_eq!(weighted_precision(&cm(&[&[3, 0], &[0, 9]])).unwrap(), 1.0);
        // equal supports reduce to the plain mean
        let eq = cm(&[&[6, 4], &[2, 8]]);
        let (p, _) = eq.precisions();
        assert!((weighted_precision(&eq).unwrap() - (p[0] + p[1]) / 2.0).abs() < 1e-15);
        assert!(weighted_precision(&cm(&[&[0, 0], &[0, 0]])).is_err());
    }

    #[test]
    fn never_predicted_class_is_flagged() {
        let c = cm(&[&[5, 0], &[5, 0]]);
        let r = EvalReport::from_confusion(c).unwrap();
        assert_eq!(r.undefined_precision, vec![1]);
        assert_eq!(r.precision[1], 0.0);
    }

    #[test]
    fn weighted_recall_examples() {
        let c = cm(&[&[8, 2], &[4, 6]]);
        assert!((weighted_recall(&c).unwrap() - 0.7).abs() < 1e-15);
        assert!((weighted_recall(&c).unwrap() - 14.0 / 20.0).abs() < 1e-15);
        assert_eq!(weighted_recall(&cm(&[&[2, 0], &[0, 5]])).unwrap(), 1.0);
    }

    #[test]
    fn table_row_format() {
        let r = EvalReport::from_confusion(cm(&[&[8, 2], &[4, 6]])).unwrap();
        let row = r.table_row("NO-PRE");
        assert!(row.starts_with("NO-PRE"));
        assert!(row.contains(" 70.0 "), "{row}");
        assert!(row.ends_with("70.0"));
    }
}
