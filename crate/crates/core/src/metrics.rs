//! Classification metrics with macro averaging.
//!
//! Averages run over every class that occurs in either the targets or the
//! predictions. A class with no predictions has precision 0, and one with
//! no targets has recall 0.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(targets: &[usize], preds: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in targets.iter().zip(preds) {
        m[t][p] += 1;
    }
    m
}

pub fn compute(targets: &[usize], preds: &[usize], num_classes: usize) -> Metrics {
    let cm = confusion_matrix(targets, preds, num_classes);
    let n = targets.len();
    let correct: usize = (0..num_classes).map(|c| cm[c][c]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut f_sum, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..num_classes {
        let tp = cm[c][c];
        let actual: usize = cm[c].iter().sum();
        let predicted: usize = cm.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        present += 1;
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        p_sum += p;
        r_sum += r;
        f_sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let avg = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
    Metrics {
        accuracy: ratio(correct, n),
        macro_precision: avg(p_sum),
        macro_recall: avg(r_sum),
        macro_f1: avg(f_sum),
        confusion: cm,
    }
}

/// Per-class recall; `None` for classes without targets.
pub fn per_class_recall(targets: &[usize], preds: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let cm = confusion_matrix(targets, preds, num_classes);
    (0..num_classes)
        .map(|c| {
            let actual: usize = cm[c].iter().sum();
            (actual > 0).then(|| cm[c][c] as f64 / actual as f64)
        })
        .collect()
}

/// Confusion matrix as CSV with a header of predicted class names.
pub fn confusion_csv(cm: &[Vec<usize>], class_names: &[String]) -> String {
    let mut out = String::from("true\\pred");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in class_names.iter().zip(cm) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
