//! Per-label ROC/AUC with midrank tie handling, category-averaged reports,
//! and top-k TP/FP/FN breakdowns.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::ontology::{Category, LabelId, Ontology};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("AUC undefined: need at least one positive and one negative, got {n_pos} pos / {n_neg} neg")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
}

/// AUC as the Mann-Whitney rank statistic with midranks for ties: the
/// probability that a random positive outscores a random negative, counting
/// ties as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // rank sum of the positives, with tied scores sharing their midrank
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let p = n_pos as f64;
    let n = n_neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC staircase from (0,0) to (1,1), one point per distinct threshold.
/// Trapezoidal area under these points equals [`auc`].
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // sweep a whole tie group at once so ties trace a diagonal segment
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under a point sequence.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// AUC of one label on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAuc {
    pub label_id: LabelId,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mean/std of a set of per-label AUCs.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetStat {
    pub n_labels: usize,
    pub mean_auc: f64,
    /// Population standard deviation over the labels in the subset.
    pub std_auc: f64,
}

/// Table-style summary: unweighted means over all evaluated labels and per
/// category. Categories with no evaluated labels are absent, not zero.
#[derive(Debug, Clone)]
pub struct CategoryReport {
    pub overall: SubsetStat,
    pub per_category: BTreeMap<Category, SubsetStat>,
    pub per_label: Vec<LabelAuc>,
    /// Labels skipped because the test set had only one class for them.
    pub skipped: Vec<LabelId>,
}

fn subset_stat(aucs: &[f64]) -> SubsetStat {
    let n = aucs.len();
    let mean = aucs.iter().sum::<f64>() / n as f64;
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    SubsetStat {
        n_labels: n,
        mean_auc: mean,
        std_auc: var.sqrt(),
    }
}

/// Per-label AUC over a score/target matrix (rows are samples). Labels with
/// a single class in `targets` are reported in the second list.
pub fn per_label_auc(
    scores: &[Vec<f64>],
    targets: &[Vec<bool>],
) -> (Vec<LabelAuc>, Vec<LabelId>) {
    assert_eq!(scores.len(), targets.len(), "sample count mismatch");
    if scores.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let k = scores[0].len();
    let results: Vec<Result<LabelAuc, LabelId>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let col_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let col_labels: Vec<bool> = targets.iter().map(|row| row[c]).collect();
            match auc(&col_scores, &col_labels) {
                Ok(a) => {
                    let n_pos = col_labels.iter().filter(|&&l| l).count();
                    Ok(LabelAuc {
                        label_id: c,
                        auc: a,
                        n_pos,
                        n_neg: col_labels.len() - n_pos,
                    })
                }
                Err(_) => Err(c),
            }
        })
        .collect();

    let mut evaluated = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(l) => evaluated.push(l),
            Err(c) => skipped.push(c),
        }
    }
    (evaluated, skipped)
}

/// Aggregates per-label AUCs into overall and per-category means. Label ids
/// must be ontology ids so categories can be looked up.
pub fn category_report(
    per_label: Vec<LabelAuc>,
    skipped: Vec<LabelId>,
    ontology: &Ontology,
) -> CategoryReport {
    assert!(!per_label.is_empty(), "no labels were evaluated");
    let all: Vec<f64> = per_label.iter().map(|l| l.auc).collect();
    let mut by_cat: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
    for l in &per_label {
        by_cat
            .entry(ontology.label(l.label_id).category)
            .or_default()
            .push(l.auc);
    }
    CategoryReport {
        overall: subset_stat(&all),
        per_category: by_cat
            .into_iter()
            .map(|(c, aucs)| (c, subset_stat(&aucs)))
            .collect(),
        per_label,
        skipped,
    }
}

/// Top-k prediction sets: TP = predicted and true, FP = predicted only,
/// FN = true but outside the top k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopkReport {
    pub tp: BTreeSet<LabelId>,
    pub fp: BTreeSet<LabelId>,
    pub fn_: BTreeSet<LabelId>,
}

pub fn topk_report(scores: &[f64], truth: &BTreeSet<LabelId>, k: usize) -> TopkReport {
    let topk: BTreeSet<LabelId> = crate::model::predict_topk(scores, k).into_iter().collect();
    TopkReport {
        tp: topk.intersection(truth).copied().collect(),
        fp: topk.difference(truth).copied().collect(),
        fn_: truth.difference(&topk).copied().collect(),
    }
}

/// Per-label metrics CSV: `label_id,label_name,category,n_pos,n_neg,auc`.
pub fn per_label_csv(report: &CategoryReport, ontology: &Ontology) -> String {
    let mut out = String::from("label_id,label_name,category,n_pos,n_neg,auc\n");
    let mut rows = report.per_label.clone();
    rows.sort_by_key(|l| l.label_id);
    for l in rows {
        let def = ontology.label(l.label_id);
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            l.label_id, def.name, def.category, l.n_pos, l.n_neg, l.auc
        ));
    }
    out
}

/// Summary CSV with one row per label subset (overall plus each category
/// that has evaluated labels).
pub fn summary_csv(report: &CategoryReport) -> String {
    let mut out = String::from("subset,n_labels,mean_auc,std_auc\n");
    out.push_str(&format!(
        "overall,{},{:.6},{:.6}\n",
        report.overall.n_labels, report.overall.mean_auc, report.overall.std_auc
    ));
    for (cat, stat) in &report.per_category {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            cat, stat.n_labels, stat.mean_auc, stat.std_auc
        ));
    }
    out
}

/// ROC points CSV: `fpr,tpr`.
pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in points {
        out.push_str(&format!("{fpr:.6},{tpr:.6}\n"));
    }
    out
}
