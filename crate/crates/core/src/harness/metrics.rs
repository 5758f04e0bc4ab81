//! Classification metrics and cross-validation summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub accuracy: f64,
}

impl ClassificationMetrics {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("f1_macro".to_string(), self.f1_macro),
            ("f1_micro".to_string(), self.f1_micro),
            ("precision_macro".to_string(), self.precision_macro),
            ("recall_macro".to_string(), self.recall_macro),
        ])
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and averaged precision, recall and F1.
///
/// Undefined ratios count as 0. The macro average runs over classes that
/// appear in either `truth` or `pred`.
pub fn evaluate_classification(pred: &[usize], truth: &[usize], classes: usize) -> Result<ClassificationMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    if let Some(c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::shape(format!("class {c} out of range for {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support: tp[c] + fn_[c],
            }
        })
        .collect();
    let present: Vec<usize> = (0..classes).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let avg = |f: fn(&ClassMetrics) -> f64| present.iter().map(|&c| f(&per_class[c])).sum::<f64>() / present.len() as f64;
    let (tp_all, fp_all, fn_all) = (tp.iter().sum(), fp.iter().sum::<usize>(), fn_.iter().sum::<usize>());
    let micro_p = ratio(tp_all, tp_all + fp_all);
    let micro_r = ratio(tp_all, tp_all + fn_all);
    Ok(ClassificationMetrics {
        precision_macro: avg(|m| m.precision),
        recall_macro: avg(|m| m.recall),
        f1_macro: avg(|m| m.f1),
        f1_micro: f1(micro_p, micro_r),
        accuracy: ratio(tp_all, truth.len()),
        per_class,
    })
}

/// Area under the ROC curve for binary `labels`, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUROC needs both positive and negative samples".into()));
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Per-fold metrics with their mean and population standard deviation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<BTreeMap<String, f64>>) -> Self {
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        if let Some(first) = per_fold.first() {
            for key in first.keys() {
                let vals: Vec<f64> = per_fold.iter().filter_map(|f| f.get(key).copied()).collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                mean.insert(key.clone(), m);
                std.insert(key.clone(), var.sqrt());
            }
        }
        MetricsReport { per_fold, mean, std }
    }

    pub fn mean_of(&self, key: &str) -> Option<f64> {
        self.mean.get(key).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_one_class_prediction() {
        let m = evaluate_classification(&[0, 0], &[0, 1], 2).unwrap();
        assert!((m.f1_macro - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.f1_micro - 0.5).abs() < 1e-12);
        assert_eq!(m.per_class[1].precision, 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let m = evaluate_classification(&[0, 1, 2, 1], &[0, 1, 2, 1], 4).unwrap();
        assert_eq!(m.f1_macro, 1.0);
        assert_eq!(m.f1_micro, 1.0);
        assert_eq!(m.per_class[3].support, 0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(evaluate_classification(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(auroc(&[0.1], &[true]).is_err());
    }

    #[test]
    fn report_mean_and_std() {
        let folds = vec![
            BTreeMap::from([("f1_macro".to_string(), 0.5)]),
            BTreeMap::from([("f1_macro".to_string(), 1.0)]),
        ];
        let r = MetricsReport::from_folds(folds);
        assert_eq!(r.mean_of("f1_macro"), Some(0.75));
        assert_eq!(r.std["f1_macro"], 0.25);
    }
}
