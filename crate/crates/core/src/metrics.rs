//! Binary-classification metrics and the validation report.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Confusion counts indexed as `counts[true_label][predicted_label]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[usize; 2]; 2],
}

impl ConfusionMatrix {
    pub fn counts(&self) -> &[[usize; 2]; 2] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn true_positives(&self, class: usize) -> usize {
        self.counts[class][class]
    }

    fn false_positives(&self, class: usize) -> usize {
        self.counts[1 - class][class]
    }

    fn false_negatives(&self, class: usize) -> usize {
        self.counts[class][1 - class]
    }

    fn support(&self, class: usize) -> usize {
        self.counts[class][0] + self.counts[class][1]
    }
}

/// Tallies predictions against ground truth. Both lists must be the same
/// non-zero length and contain only labels 0 and 1.
pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("confusion over an empty label list".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "confusion length mismatch: {} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = [[0usize; 2]; 2];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t > 1 || p > 1 {
            return Err(Error::InvalidArgument(format!(
                "labels must be 0 or 1, got true={t} pred={p} at index {i}"
            )));
        }
        counts[t as usize][p as usize] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Per-class precision/recall/f1 with the class's ground-truth support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The full validation report: accuracy, per-class rows, macro and
/// support-weighted averages. Values are kept at full precision; rounding
/// happens only in [`format_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: [ClassMetrics; 2],
    pub macro_avg: AverageMetrics,
    pub weighted_avg: AverageMetrics,
    pub total_support: usize,
    /// Classes where a 0/0 was defined as 0.0 (no support and no predictions).
    pub degenerate_classes: Vec<u8>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Computes the report from a confusion matrix. Any 0/0 rate is defined as
/// 0.0 and the class is flagged in `degenerate_classes`.
pub fn report(cm: &ConfusionMatrix) -> MetricsReport {
    let total = cm.total();
    debug_assert!(total >= 1);
    let mut per_class = Vec::with_capacity(2);
    let mut degenerate = Vec::new();
    for class in 0..2 {
        let tp = cm.true_positives(class);
        let fp = cm.false_positives(class);
        let fneg = cm.false_negatives(class);
        let support = cm.support(class);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if tp + fp == 0 && support == 0 {
            degenerate.push(class as u8);
        }
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let accuracy = ratio(cm.true_positives(0) + cm.true_positives(1), total);

    let macro_avg = AverageMetrics {
        precision: (per_class[0].precision + per_class[1].precision) / 2.0,
        recall: (per_class[0].recall + per_class[1].recall) / 2.0,
        f1: (per_class[0].f1 + per_class[1].f1) / 2.0,
    };
    let weight = |m: fn(&ClassMetrics) -> f64| {
        (m(&per_class[0]) * per_class[0].support as f64
            + m(&per_class[1]) * per_class[1].support as f64)
            / total as f64
    };
    let weighted_avg = AverageMetrics {
        precision: weight(|c| c.precision),
        // Support-weighted recall reduces algebraically to trace/total, i.e.
        // accuracy; computed as such so the identity is exact in floats.
        recall: accuracy,
        f1: weight(|c| c.f1),
    };

    MetricsReport {
        accuracy,
        per_class: [per_class[0].clone(), per_class[1].clone()],
        macro_avg,
        weighted_avg,
        total_support: total,
        degenerate_classes: degenerate,
    }
}

/// Renders the fixed-width validation table: accuracy header to 4 decimals,
/// per-class and average rows with rates to 2 decimals.
pub fn format_report(r: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("Validation Accuracy: {:.4}\n\n", r.accuracy));
    out.push_str(&format!(
        "{:>12}  {:>9}  {:>6}  {:>8}  {:>7}\n\n",
        "", "precision", "recall", "f1-score", "support"
    ));
    for (class, m) in r.per_class.iter().enumerate() {
        out.push_str(&format!(
            "{:>12}  {:>9.2}  {:>6.2}  {:>8.2}  {:>7}\n",
            class, m.precision, m.recall, m.f1, m.support
        ));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:>12}  {:>9.2}  {:>6.2}  {:>8.2}  {:>7}\n",
        "macro avg", r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1, r.total_support
    ));
    out.push_str(&format!(
        "{:>12}  {:>9.2}  {:>6.2}  {:>8.2}  {:>7}\n",
        "weighted avg",
        r.weighted_avg.precision,
        r.weighted_avg.recall,
        r.weighted_avg.f1,
        r.total_support
    ));
    for class in &r.degenerate_classes {
        out.push_str(&format!(
            "\nnote: class {class} has no support and no predictions; its rates are reported as 0.00\n"
        ));
    }
    out
}
