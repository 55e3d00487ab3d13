//! Classification metrics: accuracy, per-class and macro F1, equal error
//! rate, confusion matrix, and the JSON report that bundles them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Input("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    /// Classes that were neither predicted nor present; their F1 is 0.
    pub absent: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pairs(preds, labels)?;
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Input(format!(
                "class index {} outside {num_classes} classes",
                p.max(l)
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class precision, recall and F1 (0/0 taken as 0), and their macro mean.
pub fn f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<F1Scores> {
    let m = confusion_matrix(preds, labels, num_classes)?;
    let mut out = F1Scores {
        precision: Vec::with_capacity(num_classes),
        recall: Vec::with_capacity(num_classes),
        f1: Vec::with_capacity(num_classes),
        macro_f1: 0.0,
        absent: Vec::new(),
    };
    for c in 0..num_classes {
        let tp = m[c][c];
        let predicted: usize = (0..num_classes).map(|r| m[r][c]).sum();
        let present: usize = m[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, present);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if predicted == 0 && present == 0 {
            out.absent.push(c);
        }
        out.precision.push(p);
        out.recall.push(r);
        out.f1.push(f);
    }
    out.macro_f1 = out.f1.iter().sum::<f64>() / num_classes as f64;
    Ok(out)
}

/// Detection trials: `(score, is_target)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub trials: Vec<(f64, bool)>,
}

impl ScoreSet {
    pub fn new(trials: Vec<(f64, bool)>) -> Self {
        Self { trials }
    }

    pub fn from_parts(scores: &[f64], is_target: &[bool]) -> Self {
        Self::new(scores.iter().copied().zip(is_target.iter().copied()).collect())
    }
}

/// Equal error rate with a trial accepted when its score is at or above the
/// threshold.
///
/// FAR and FRR are evaluated at every distinct score and at +∞; the EER is
/// read off the first pair of adjacent operating points where FAR − FRR
/// changes sign, interpolating linearly between them.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let targets = scores.trials.iter().filter(|t| t.1).count();
    let nontargets = scores.trials.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::Input(format!(
            "EER needs target and non-target trials, got {targets} and {nontargets}"
        )));
    }
    if let Some((s, _)) = scores.trials.iter().find(|t| !t.0.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let mut sorted = scores.trials.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets as f64, nontargets as f64);

    // At the lowest score everything is accepted.
    let mut rejected_targets = 0usize;
    let mut rejected_nontargets = 0usize;
    let mut prev: (f64, f64) = (1.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                rejected_targets += 1;
            } else {
                rejected_nontargets += 1;
            }
            i += 1;
        }
        // Threshold just above `s`: the next distinct score, or +∞.
        let far = (nontargets - rejected_nontargets) as f64 / nn;
        let frr = rejected_targets as f64 / nt;
        let cur = (far, frr);
        let d0 = prev.0 - prev.1;
        let d1 = cur.0 - cur.1;
        if d1 <= 0.0 {
            if d1 == 0.0 {
                return Ok(cur.0);
            }
            let a = d0 / (d0 - d1);
            return Ok(prev.0 + a * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("FAR − FRR reaches −1 at +∞")
}

/// Mean over classes of the one-vs-rest EER of each probability column.
pub fn multiclass_eer(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} score rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs[0].len();
    if probs.iter().any(|r| r.len() != c) {
        return Err(Error::Input("score rows differ in width".into()));
    }
    let mut total = 0.0;
    for class in 0..c {
        let set = ScoreSet::new(
            probs
                .iter()
                .zip(labels)
                .map(|(row, &l)| (row[class], l == class))
                .collect(),
        );
        total += eer(&set).map_err(|e| Error::Input(format!("class {class}: {e}")))?;
    }
    Ok(total / c as f64)
}

/// One evaluation run. The first six fields form the stable report schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_per_class: Vec<f64>,
    pub eer: f64,
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
    pub precision_per_class: Vec<f64>,
    pub recall_per_class: Vec<f64>,
    pub absent_classes: Vec<usize>,
    pub f1_averaging: String,
    pub eer_pooling: String,
}

pub fn make_report(preds: &[usize], probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if probs.len() != preds.len() || probs.iter().any(|r| r.len() != num_classes) {
        return Err(Error::Input(format!(
            "score matrix does not match {} predictions over {num_classes} classes",
            preds.len()
        )));
    }
    let scores = f1(preds, labels, num_classes)?;
    Ok(MetricsReport {
        accuracy: accuracy(preds, labels)?,
        f1_macro: scores.macro_f1,
        f1_per_class: scores.f1,
        eer: multiclass_eer(probs, labels)?,
        confusion: confusion_matrix(preds, labels, num_classes)?,
        n: preds.len(),
        precision_per_class: scores.precision,
        recall_per_class: scores.recall,
        absent_classes: scores.absent,
        f1_averaging: "macro".into(),
        eer_pooling: "mean_one_vs_rest".into(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn worked_f1_example() {
        let s = f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((s.precision[0] - 0.5).abs() < 1e-15);
        assert!((s.recall[0] - 1.0).abs() < 1e-15);
        assert!((s.precision[1] - 1.0).abs() < 1e-15);
        assert!((s.recall[1] - 0.5).abs() < 1e-15);
        for v in s.f1.iter().chain([&s.macro_f1]) {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn absent_class_scores_zero_and_is_flagged() {
        let s = f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(s.f1, vec![1.0, 1.0, 0.0]);
        assert_eq!(s.absent, vec![2]);
    }

    #[test]
    fn eer_extremes() {
        let sep = ScoreSet::from_parts(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(eer(&sep).unwrap(), 0.0);
        let same = ScoreSet::from_parts(&[0.3, 0.3], &[true, false]);
        assert_eq!(eer(&same).unwrap(), 0.5);
        let reversed = ScoreSet::from_parts(&[0.9, 0.1], &[false, true]);
        assert_eq!(eer(&reversed).unwrap(), 1.0);
        assert!(eer(&ScoreSet::from_parts(&[0.3], &[true])).is_err());
    }

    #[test]
    fn two_class_eer_is_the_class_one_eer() {
        let p1 = [0.2, 0.7, 0.4, 0.9, 0.55, 0.1];
        let labels = [0, 1, 1, 1, 0, 0];
        let probs: Vec<Vec<f64>> = p1.iter().map(|p| vec![1.0 - p, *p]).collect();
        let binary = eer(&ScoreSet::new(p1.iter().zip(&labels).map(|(p, l)| (*p, *l == 1)).collect())).unwrap();
        assert!((multiclass_eer(&probs, &labels).unwrap() - binary).abs() < 1e-12);
    }

    #[test]
    fn perfect_report() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![1.0, 0.0]];
        let r = make_report(&[0, 1, 0], &probs, &[0, 1, 0], 2).unwrap();
        assert_eq!((r.accuracy, r.f1_macro, r.eer), (1.0, 1.0, 0.0));
        assert_eq!(r.confusion, vec![vec![2, 0], vec![0, 1]]);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert!(make_report(&[0], &probs, &[0], 2).is_err());
    }
}
