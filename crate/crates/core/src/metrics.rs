//! Top-1 accuracy, macro F1, confusion matrices and per-class tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Confusion = Vec<Vec<usize>>;

/// `counts[t][p]` = number of samples with true class `t` predicted as `p`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Confusion> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("confusion_matrix", &[y_true.len()], &[y_pred.len()]));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::contract(format!("class pair ({t}, {p}) out of range for {num_classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn check_square(m: &Confusion) -> Result<usize> {
    let n = m.len();
    if let Some(row) = m.iter().find(|r| r.len() != n) {
        return Err(Error::dim("confusion matrix", &[n, n], &[n, row.len()]));
    }
    Ok(n)
}

/// Per-class F1 with the `0/0 → 0` convention.
pub fn per_class_f1(m: &Confusion) -> Result<Vec<f64>> {
    let n = check_square(m)?;
    Ok((0..n)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: usize = m.iter().map(|r| r[c]).sum();
            let actual: usize = m[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1 over every class, including classes
/// with no true samples (which score 0).
pub fn f1_macro(m: &Confusion) -> Result<f64> {
    let f1 = per_class_f1(m)?;
    if f1.is_empty() {
        return Ok(0.0);
    }
    for (c, row) in m.iter().enumerate() {
        if row.iter().sum::<usize>() == 0 {
            log::warn!("class {c} has no samples; it contributes F1 = 0 to the macro mean");
        }
    }
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

pub fn top1_accuracy(m: &Confusion) -> Result<f64> {
    let n = check_square(m)?;
    let total: usize = m.iter().flatten().sum();
    if total == 0 {
        return Err(Error::contract("top-1 accuracy of zero samples"));
    }
    let correct: usize = (0..n).map(|c| m[c][c]).sum();
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub f1_macro: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Confusion,
    pub support: Vec<usize>,
    /// Mean fusion weight row per class, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

impl MetricsReport {
    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(y_true, y_pred, num_classes)?;
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, r)| if support[c] == 0 { 0.0 } else { r[c] as f64 / support[c] as f64 })
            .collect();
        Ok(Self {
            top1: top1_accuracy(&confusion)?,
            f1_macro: f1_macro(&confusion)?,
            per_class_f1: per_class_f1(&confusion)?,
            per_class_accuracy,
            support,
            confusion,
            attention: None,
        })
    }

    /// Mean per-class accuracy over `classes`.
    pub fn mean_accuracy_over(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        classes.iter().map(|&c| self.per_class_accuracy[c]).sum::<f64>() / classes.len() as f64
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut s = String::from("true\\pred");
        for c in 0..n {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else { format!("{x}") };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTag {
    Ambiguous,
    Underrepresented,
    Subtle,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAnnotation {
    pub tag: ClassTag,
    /// Percentage of the training set belonging to this class.
    pub train_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class_id: usize,
    pub tag: ClassTag,
    pub train_share: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// One row per class, sorted by tag and then class id.
pub fn per_class_table(report: &MetricsReport, annotations: &BTreeMap<usize, ClassAnnotation>) -> Result<Vec<PerClassRow>> {
    let n = report.per_class_f1.len();
    if let Some(bad) = annotations.keys().find(|&&c| c >= n) {
        return Err(Error::contract(format!("annotation for unknown class {bad}")));
    }
    let mut rows: Vec<PerClassRow> = (0..n)
        .map(|c| {
            let a = annotations.get(&c).copied().unwrap_or_default();
            PerClassRow {
                class_id: c,
                tag: a.tag,
                train_share: a.train_share,
                accuracy: report.per_class_accuracy[c],
                f1: report.per_class_f1[c],
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.tag, r.class_id));
    Ok(rows)
}
