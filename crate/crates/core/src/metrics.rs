//! Binary detector metrics. Scores are oriented so that higher means
//! "more likely fake"; label 1 is fake.

use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if scores.is_empty() {
            return Err(Error::domain("scored set is empty"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::domain("labels must be 0 (real) or 1 (fake)"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("scores must be finite"));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (pos, neg) = self.class_counts();
        if pos == 0 || neg == 0 {
            return Err(Error::domain("both classes must be present"));
        }
        Ok((pos, neg))
    }

    /// Indices sorted by ascending score.
    fn ascending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        idx
    }
}

/// Area under the ROC curve by trapezoidal integration over distinct
/// thresholds. Equals the probability that a random fake outscores a random
/// real, with ties counted as one half.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.require_both_classes()?;
    let order = set.ascending();
    // Walk thresholds from high to low so (fp, tp) grows from (0, 0).
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut k = order.len();
    while k > 0 {
        let s = set.scores[order[k - 1]];
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while k > 0 && set.scores[order[k - 1]] == s {
            if set.labels[order[k - 1]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            k -= 1;
        }
        area += dfp as f64 * (2 * tp + dtp) as f64 / 2.0;
        tp += dtp;
        fp += dfp;
    }
    debug_assert_eq!((tp, fp), (pos, neg));
    Ok(area / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerPoint {
    pub eer: f64,
    /// Predict fake iff `score >= threshold`; infinite when nothing is flagged.
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Equal error rate from an exhaustive sweep over every distinct score plus
/// one threshold above all scores. Picks the point minimising `|FPR - FNR|`
/// (lowest threshold on ties) and reports `(FPR + FNR) / 2` there.
pub fn eer(set: &ScoredSet) -> Result<EerPoint> {
    let (pos, neg) = set.require_both_classes()?;
    let order = set.ascending();
    let mut fn_count = 0usize; // positives strictly below the threshold
    let mut tn_count = 0usize; // negatives strictly below the threshold
    let mut best: Option<EerPoint> = None;
    let mut consider = |threshold: f64, fn_count: usize, tn_count: usize| {
        let fpr = (neg - tn_count) as f64 / neg as f64;
        let fnr = fn_count as f64 / pos as f64;
        let gap = (fpr - fnr).abs();
        if best.is_none_or(|b| gap < (b.fpr - b.fnr).abs()) {
            best = Some(EerPoint {
                eer: (fpr + fnr) / 2.0,
                threshold,
                fpr,
                fnr,
            });
        }
    };
    let mut k = 0;
    while k < order.len() {
        let s = set.scores[order[k]];
        consider(s, fn_count, tn_count);
        while k < order.len() && set.scores[order[k]] == s {
            if set.labels[order[k]] == 1 {
                fn_count += 1;
            } else {
                tn_count += 1;
            }
            k += 1;
        }
    }
    consider(f64::INFINITY, fn_count, tn_count);
    Ok(best.expect("at least one threshold"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub acc: f64,
    pub threshold_used: f64,
    pub counts: Confusion,
}

impl MetricsReport {
    /// Compact single-line form: `acc=… eer=… auc=… n=…`.
    pub fn line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        format!(
            "acc={:.4} eer={} auc={} n={}",
            self.acc,
            fmt(self.eer),
            fmt(self.auc),
            self.counts.total()
        )
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Thresholded accuracy and confusion counts; fake is predicted when
/// `score >= threshold`. AUC and EER are left empty.
pub fn acc(set: &ScoredSet, threshold: f64) -> MetricsReport {
    let mut c = Confusion::default();
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    MetricsReport {
        auc: None,
        eer: None,
        acc: (c.tp + c.tn) as f64 / c.total() as f64,
        threshold_used: threshold,
        counts: c,
    }
}

/// Accuracy plus AUC and EER when both classes are present.
pub fn evaluate(set: &ScoredSet, threshold: f64) -> MetricsReport {
    let mut report = acc(set, threshold);
    if set.require_both_classes().is_ok() {
        report.auc = auc(set).ok();
        report.eer = eer(set).ok().map(|p| p.eer);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[usize]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert!(matches!(auc(&set(&[0.1, 0.2], &[1, 1])), Err(Error::Domain(_))));
    }

    #[test]
    fn eer_examples() {
        let p = eer(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap();
        assert_eq!(p.eer, 0.0);
        assert_eq!(p.threshold, 0.8);
        let anti = eer(&set(&[0.8, 0.9, 0.1, 0.2], &[0, 0, 1, 1])).unwrap();
        assert!((0.5..=1.0).contains(&anti.eer));
        assert_eq!(anti.eer, 1.0);
        // thresholds 0.2, 0.4, 0.6, 0.8, inf -> |FPR-FNR| = 1, .5, 0, .5, 1
        let p = eer(&set(&[0.2, 0.6, 0.4, 0.8], &[0, 0, 1, 1])).unwrap();
        assert_eq!(p.threshold, 0.6);
        assert_eq!(p.eer, 0.5);
        assert!(eer(&set(&[0.3], &[0])).is_err());
    }

    #[test]
    fn acc_examples() {
        let s = set(&[0.1, 0.7, 0.5, 0.2], &[0, 1, 1, 0]);
        let r = acc(&s, 0.5);
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.counts, Confusion { tp: 2, fp: 0, tn: 2, fn_: 0 });
        let flipped = set(&[0.1, 0.7, 0.5, 0.2, 0.9], &[1, 0, 0, 1, 0]);
        let unflipped = set(&[0.1, 0.7, 0.5, 0.2, 0.9], &[0, 1, 1, 0, 1]);
        assert!((acc(&flipped, 0.5).acc - (1.0 - acc(&unflipped, 0.5).acc)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_single_class_leaves_rank_metrics_empty() {
        let r = evaluate(&set(&[0.9, 0.8], &[1, 1]), 0.5);
        assert_eq!(r.auc, None);
        assert_eq!(r.acc, 1.0);
        assert!(r.line().contains("auc=-"));
    }

    #[test]
    fn scored_set_validation() {
        assert!(ScoredSet::new(vec![], vec![]).is_err());
        assert!(ScoredSet::new(vec![0.1], vec![2]).is_err());
        assert!(ScoredSet::new(vec![0.1, 0.2], vec![1]).is_err());
        assert!(ScoredSet::new(vec![f64::NAN], vec![1]).is_err());
    }
}
