//! Classification metrics for imbalanced data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidInput(format!("label {} outside {classes} classes", t.max(p))));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Mean per-class recall.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    let mut sum = 0.0;
    for c in 0..k {
        let support = cm.support(c);
        if support == 0 {
            return Err(Error::EmptyClass(c));
        }
        sum += cm.get(c, c) as f64 / support as f64;
    }
    Ok(sum / k as f64)
}

/// Cohen's kappa; defined as 0 when chance agreement is 1.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let k = cm.classes();
    let p_o = (0..k).map(|c| cm.get(c, c) as f64).sum::<f64>() / n;
    let p_e = (0..k)
        .map(|c| (cm.support(c) as f64 / n) * (cm.predicted(c) as f64 / n))
        .sum::<f64>();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Support-weighted F1; a class with zero precision and recall scores 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let mut acc = 0.0;
    for c in 0..cm.classes() {
        let tp = cm.get(c, c) as f64;
        let fn_ = cm.support(c) as f64 - tp;
        let fp = cm.predicted(c) as f64 - tp;
        let denom = tp + 0.5 * (fp + fn_);
        let f1 = if tp == 0.0 { 0.0 } else { tp / denom };
        acc += cm.support(c) as f64 / n * f1;
    }
    Ok(acc)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("AUC needs both positive and negative labels".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the Mann-Whitney rank statistic with tied
/// scores sharing their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve by step integration:
/// `Σ (R_i − R_{i−1}) · P_i` over distinct score thresholds, highest first.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Serialized metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub split: String,
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
    /// Binary tasks only.
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub n: u64,
}

impl MetricReport {
    /// `probs[i][c]` is the predicted probability of class `c` for sample `i`.
    pub fn evaluate(task: &str, split: &str, truth: &[usize], probs: &[Vec<f64>]) -> Result<Self> {
        let classes = probs.first().map_or(0, Vec::len);
        if classes < 2 {
            return Err(Error::InvalidInput("need at least two classes".into()));
        }
        let pred: Vec<usize> = probs
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect();
        let cm = ConfusionMatrix::from_predictions(truth, &pred, classes)?;
        let (auroc_v, aucpr_v) = if classes == 2 {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            (auroc(&scores, &labels).ok(), auc_pr(&scores, &labels).ok())
        } else {
            (None, None)
        };
        Ok(MetricReport {
            task: task.to_string(),
            split: split.to_string(),
            balanced_accuracy: balanced_accuracy(&cm)?,
            kappa: cohens_kappa(&cm)?,
            weighted_f1: weighted_f1(&cm)?,
            auroc: auroc_v,
            auc_pr: aucpr_v,
            n: cm.total(),
        })
    }
}
