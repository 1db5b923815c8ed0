//! Confusion-matrix bookkeeping and macro-averaged metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// Square count matrix with rows = true class, columns = predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// Row-major `labels.len()²` counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        let n = self.n();
        assert!(true_class < n && predicted < n, "class index out of range");
        self.counts[true_class * n + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n() + predicted]
    }

    pub fn row_total(&self, true_class: usize) -> u64 {
        (0..self.n()).map(|p| self.count(true_class, p)).sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.n()).map(|t| self.count(t, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|c| self.count(c, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sums another matrix into this one (order-independent merge).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::Data("confusion matrices disagree on labels".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// CSV rendering: header row of predicted labels, then one row per
    /// true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (t, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for p in 0..self.n() {
                out.push_str(&format!(",{}", self.count(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregated evaluation outcome.  Macro metrics average per-class
/// values with the `0/0 → 0` convention; under class-balanced queries
/// (equal row totals) accuracy and macro-recall coincide as rational
/// numbers.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Per-class recall, indexed like `confusion.labels`.
    pub per_class_accuracy: Vec<f64>,
    pub episodes: usize,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derives all metrics from a confusion matrix.
pub fn report_from(confusion: ConfusionMatrix, episodes: usize) -> MetricsReport {
    let n = confusion.n();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut f1s = Vec::with_capacity(n);
    for c in 0..n {
        let tp = confusion.count(c, c);
        let p = ratio(tp, confusion.col_total(c));
        let r = ratio(tp, confusion.row_total(c));
        precisions.push(p);
        recalls.push(r);
        f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    MetricsReport {
        accuracy: ratio(confusion.trace(), confusion.total()),
        macro_precision: mean(&precisions),
        macro_recall: mean(&recalls),
        macro_f1: mean(&f1s),
        per_class_accuracy: recalls,
        episodes,
        confusion,
    }
}
