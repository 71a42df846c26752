//! Confusion matrix, precision/recall and F1.

use serde::Serialize;

use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};

const K: usize = CLASS_NAMES.len();

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    Macro,
    Micro,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::shape("confusion", &[preds.len()], &[labels.len()]));
        }
        let mut cm = Self::default();
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= K || t >= K {
                return Err(Error::invalid("confusion", format!("class index out of range: true {t}, predicted {p}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn diag(&self) -> u64 {
        (0..K).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.diag(), self.total())
    }

    /// Per-class precision; 0 for a class that was never predicted.
    pub fn precision(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], (0..K).map(|r| self.counts[r][class]).sum())
    }

    /// Per-class recall; 0 for a class with no instances.
    pub fn recall(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], self.counts[class].iter().sum())
    }

    pub fn precision_recall(&self, averaging: Averaging) -> (f64, f64) {
        match averaging {
            Averaging::Macro => {
                let p = (0..K).map(|c| self.precision(c)).sum::<f64>() / K as f64;
                let r = (0..K).map(|c| self.recall(c)).sum::<f64>() / K as f64;
                (p, r)
            }
            Averaging::Micro => (self.accuracy(), self.accuracy()),
        }
    }

    /// Classes whose precision or recall hit a zero denominator.
    pub fn undefined_classes(&self) -> Vec<&'static str> {
        (0..K)
            .filter(|&c| self.counts[c].iter().sum::<u64>() == 0 || (0..K).all(|r| self.counts[r][c] == 0))
            .map(|c| CLASS_NAMES[c])
            .collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall, as a percentage.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall) * 100.0
    }
}

/// Round to two decimals, the presentation used for percentages.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Percentage.
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Percentage, from the macro precision/recall pair.
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub per_class: std::collections::BTreeMap<String, ClassMetrics>,
    pub undefined: Vec<String>,
}

impl MetricsRecord {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let (macro_precision, macro_recall) = cm.precision_recall(Averaging::Macro);
        let (micro_precision, micro_recall) = cm.precision_recall(Averaging::Micro);
        let per_class = CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let (p, r) = (cm.precision(c), cm.recall(c));
                let m = ClassMetrics {
                    precision: p,
                    recall: r,
                    f1: round2(f1(p, r)),
                    support: cm.counts[c].iter().sum(),
                };
                (name.to_string(), m)
            })
            .collect();
        Self {
            accuracy: cm.accuracy(),
            macro_precision,
            macro_recall,
            macro_f1: round2(f1(macro_precision, macro_recall)),
            micro_precision,
            micro_recall,
            per_class,
            undefined: cm.undefined_classes().into_iter().map(String::from).collect(),
        }
    }
}
