//! One-vs-rest confusion counts and precision/recall.

use serde::{Deserialize, Serialize};

use crate::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// TP / (TP + FP); undefined (None) when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let denom = self.tp + self.fp;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    /// TP / (TP + FN); undefined (None) when the class has no actual members.
    pub fn recall(&self) -> Option<f64> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub per_class: Vec<ClassCounts>,
    pub samples: usize,
}

/// Counts each class one-vs-rest. Labels are class indices below `n_classes`.
pub fn confusion_stats(
    predicted: &[usize],
    actual: &[usize],
    n_classes: usize,
) -> Result<ConfusionStats, AnalysisError> {
    if predicted.len() != actual.len() {
        return Err(AnalysisError::Invalid(format!(
            "{} predictions but {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    for &l in predicted.iter().chain(actual) {
        if l >= n_classes {
            return Err(AnalysisError::Invalid(format!(
                "label {l} outside class list of size {n_classes}"
            )));
        }
    }
    let n = predicted.len();
    let mut per_class = vec![
        ClassCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        n_classes
    ];
    for c in 0..n_classes {
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == c, a == c) {
                (true, true) => per_class[c].tp += 1,
                (true, false) => per_class[c].fp += 1,
                (false, true) => per_class[c].fn_ += 1,
                (false, false) => per_class[c].tn += 1,
            }
        }
        debug_assert_eq!(per_class[c].total(), n);
    }
    Ok(ConfusionStats {
        per_class,
        samples: n,
    })
}

/// Per-class (precision, recall); None encodes an undefined ratio.
pub fn precision_recall(stats: &ConfusionStats) -> Vec<(Option<f64>, Option<f64>)> {
    stats
        .per_class
        .iter()
        .map(|c| (c.precision(), c.recall()))
        .collect()
}
