//! Imbalance-robust metrics.
//!
//! Classes (or topology groups) absent from the evaluated instances are left
//! out of the macro averages instead of counting as zero.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f: f64,
    pub auroc: f64,
    pub topo_acc: Option<f64>,
    pub accuracy: f64,
    /// `None` for classes that do not occur in the labels.
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_auroc: Vec<Option<f64>>,
    pub per_group_acc: Vec<Option<f64>>,
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::contract("no instances to evaluate"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Per-class F1 for every class id up to the largest seen; `None` where the
/// class has no true instances.
pub fn per_class_f1(preds: &[usize], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    check_lengths(preds, labels)?;
    let n_classes = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        predicted[p] += 1;
        actual[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            if actual[c] == 0 {
                return None;
            }
            let precision = if predicted[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / predicted[c] as f64
            };
            let recall = tp[c] as f64 / actual[c] as f64;
            Some(if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            })
        })
        .collect())
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Unweighted mean of per-class F1 over classes present in `labels`.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let f = per_class_f1(preds, labels)?;
    mean_present(&f).ok_or_else(|| Error::contract("no classes present"))
}

/// Mann–Whitney AUC of `scores` for the positive set, ties counted as one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn per_class_auroc(scores: &Array2<f64>, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.nrows() != labels.len() {
        return Err(Error::contract(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= scores.ncols()) {
        return Err(Error::contract(format!(
            "label {bad} outside {} score columns",
            scores.ncols()
        )));
    }
    Ok((0..scores.ncols())
        .map(|c| {
            let col: Vec<f64> = scores.column(c).to_vec();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&col, &positive)
        })
        .collect())
}

/// Macro one-vs-rest AUROC over classes with both positives and negatives.
pub fn auroc_macro(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let per = per_class_auroc(scores, labels)?;
    mean_present(&per).ok_or_else(|| Error::contract("no class has both positives and negatives"))
}

pub fn per_group_accuracy(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<Vec<Option<f64>>> {
    check_lengths(preds, labels)?;
    if groups.len() != preds.len() {
        return Err(Error::contract("group labels differ in length from predictions"));
    }
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; n_groups];
    let mut sizes = vec![0usize; n_groups];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        sizes[g] += 1;
        if p == y {
            hits[g] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&sizes)
        .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
        .collect())
}

/// Unweighted mean of per-topology-group accuracy.
pub fn topo_acc(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<f64> {
    let per = per_group_accuracy(preds, labels, groups)?;
    mean_present(&per).ok_or_else(|| Error::contract("no topology groups present"))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Scores probability rows against labels and, when given, topology groups.
pub fn evaluate(scores: &Array2<f64>, labels: &[usize], groups: Option<&[usize]>) -> Result<MetricsReport> {
    let preds = argmax_rows(scores);
    let per_class_f1 = per_class_f1(&preds, labels)?;
    let per_class_auroc = per_class_auroc(scores, labels)?;
    let per_group_acc = match groups {
        Some(g) => per_group_accuracy(&preds, labels, g)?,
        None => Vec::new(),
    };
    Ok(MetricsReport {
        macro_f: mean_present(&per_class_f1).ok_or_else(|| Error::contract("no classes present"))?,
        auroc: mean_present(&per_class_auroc).unwrap_or(0.5),
        topo_acc: mean_present(&per_group_acc),
        accuracy: accuracy(&preds, labels)?,
        per_class_f1,
        per_class_auroc,
        per_group_acc,
    })
}

/// Mean with both dispersion conventions over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            stderr: std / (n as f64).sqrt(),
            n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        assert_eq!(macro_f1(&y, &y).unwrap(), 1.0);
        assert_eq!(topo_acc(&y, &y, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn half_right_confusion() {
        assert!((macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_predicted_class() {
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 only predicted, never true: excluded from the mean
        let f = macro_f1(&[0, 2], &[0, 0]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(macro_f1(&[], &[]).is_err());
    }

    fn binary_rows(s: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((s.len(), 2), |(i, j)| if j == 1 { s[i] } else { 1.0 - s[i] })
    }

    #[test]
    fn auroc_examples() {
        let y = [0, 0, 1, 1];
        assert_eq!(auroc_macro(&binary_rows(&[0.1, 0.2, 0.8, 0.9]), &y).unwrap(), 1.0);
        assert_eq!(auroc_macro(&binary_rows(&[0.5; 4]), &y).unwrap(), 0.5);
        let a = auroc_macro(&binary_rows(&[0.1, 0.4, 0.35, 0.8]), &y).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_needs_both_sides() {
        let s = arr2(&[[0.6, 0.4], [0.7, 0.3]]);
        assert!(auroc_macro(&s, &[0, 0]).is_err());
    }

    #[test]
    fn topo_acc_is_unweighted() {
        let labels = vec![0; 100];
        let groups: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let preds: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        assert!((topo_acc(&preds, &labels, &groups).unwrap() - 0.5).abs() < 1e-12);
        assert!((accuracy(&preds, &labels).unwrap() - 0.9).abs() < 1e-12);
        let two = topo_acc(&[0, 1], &[0, 0], &[0, 1]).unwrap();
        assert_eq!(two, 0.5);
    }

    #[test]
    fn summary_dispersion() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.stderr - s.std / 2.0).abs() < 1e-12);
    }
}
