use serde::{Deserialize, Serialize};

use crate::datamodel::{AgeClass, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Accuracy, per-class and macro-averaged precision/recall/F1, and the
/// confusion matrix (rows ground truth, columns predicted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    pub accuracy: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

/// `a / b`, with `0 / 0 = 0`.
fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

pub fn compute_metrics(preds: &[AgeClass], labels: &[AgeClass]) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (p, l) in preds.iter().zip(labels) {
        confusion[l.index()][p.index()] += 1;
    }
    let total = preds.len();
    let trace: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let per_class: [ClassScores; NUM_CLASSES] = std::array::from_fn(|c| {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        let support: usize = confusion[c].iter().sum();
        let precision = ratio(tp, predicted as f64);
        let recall = ratio(tp, support as f64);
        ClassScores {
            precision,
            recall,
            f1: harmonic(precision, recall),
            support,
        }
    });
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    Ok(MetricsReport {
        total,
        accuracy: trace as f64 / total as f64,
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        per_class,
        confusion,
    })
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "accuracy {:.4}  macro P {:.4}  R {:.4}  F1 {:.4}  (n = {})",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1, self.total
        )?;
        for (c, s) in AgeClass::ALL.iter().zip(&self.per_class) {
            writeln!(
                f,
                "  {:<13} P {:.4}  R {:.4}  F1 {:.4}  support {}",
                c.name(),
                s.precision,
                s.recall,
                s.f1,
                s.support
            )?;
        }
        write!(f, "  confusion (rows truth): {:?}", self.confusion)
    }
}
