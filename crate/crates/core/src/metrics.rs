//! Binary and six-class evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordinal::{CadRadsGrade, GRADE_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryOutcome {
    pub score: f64,
    pub positive: bool,
}

impl BinaryOutcome {
    pub fn new(score: f64, positive: bool) -> Self {
        Self { score, positive }
    }
}

fn check_scores(outcomes: &[BinaryOutcome]) -> Result<()> {
    if let Some(i) = outcomes.iter().position(|o| !o.score.is_finite()) {
        return Err(Error::validation(None, format!("score {i} is not finite")));
    }
    Ok(())
}

fn class_counts(outcomes: &[BinaryOutcome]) -> Result<(usize, usize)> {
    check_scores(outcomes)?;
    let pos = outcomes.iter().filter(|o| o.positive).count();
    let neg = outcomes.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: probability that a random positive outranks a random
/// negative, ties counting one half.
pub fn auc(outcomes: &[BinaryOutcome]) -> Result<f64> {
    let (pos, neg) = class_counts(outcomes)?;
    let mut sorted = outcomes.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // sweep tie groups in ascending score; count (pos, neg) pairs won
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].positive {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p as f64 * neg_below as f64 + 0.5 * p as f64 * n as f64;
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// One ROC operating point, predicting positive for `score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical ROC curve from (0, 0) to (1, 1), one point per distinct score.
pub fn roc_curve(outcomes: &[BinaryOutcome]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(outcomes)?;
    let mut scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for &s in &scores {
        // predict positive for score >= s, i.e. threshold just below s
        let tp = outcomes.iter().filter(|o| o.positive && o.score >= s).count();
        let fp = outcomes.iter().filter(|o| !o.positive && o.score >= s).count();
        points.push(RocPoint {
            threshold: next_below(s),
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

fn next_below(x: f64) -> f64 {
    // largest float strictly below x, so that `score > threshold` keeps x
    if x == f64::NEG_INFINITY {
        x
    } else if x == 0.0 {
        -f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

/// Area under the empirical ROC curve by the trapezoid rule.
pub fn trapezoid_auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum()
}

/// Operating point maximizing `tpr - fpr`; ties go to the higher threshold.
pub fn youden_point(outcomes: &[BinaryOutcome]) -> Result<RocPoint> {
    let curve = roc_curve(outcomes)?;
    let mut best = curve[0];
    for p in &curve[1..] {
        if p.tpr - p.fpr > best.tpr - best.fpr {
            best = *p;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts with `score > threshold` predicted positive.
pub fn confusion(outcomes: &[BinaryOutcome], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for o in outcomes {
        match (o.score > threshold, o.positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub acc: f64,
    pub sens: f64,
    pub spec: f64,
    pub mcc: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// ACC, sensitivity, specificity and MCC. An empty class gives 0 for its
/// rate; a zero MCC denominator gives MCC 0.
pub fn acc_sens_spec_mcc(c: &ConfusionCounts) -> BinaryMetrics {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    BinaryMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        sens: ratio(c.tp, c.tp + c.fn_),
        spec: ratio(c.tn, c.tn + c.fp),
        mcc: if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub grade: CadRadsGrade,
    pub counts: ConfusionCounts,
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SixClassMetrics {
    /// Unweighted mean over the classes present in the truth.
    pub macro_avg: BinaryMetrics,
    pub per_class: Vec<ClassMetrics>,
    /// Classes absent from the truth, left out of the mean.
    pub skipped: Vec<CadRadsGrade>,
    /// Exact-grade agreement.
    pub exact_accuracy: f64,
}

/// One-vs-rest metrics per grade, macro-averaged.
pub fn six_class_metrics(truth: &[CadRadsGrade], pred: &[CadRadsGrade]) -> Result<SixClassMetrics> {
    if truth.len() != pred.len() {
        return Err(Error::validation(
            None,
            format!("{} true grades but {} predictions", truth.len(), pred.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::validation(None, "no cases to evaluate"));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for grade in CadRadsGrade::all() {
        if !truth.contains(&grade) {
            skipped.push(grade);
            continue;
        }
        let outcomes: Vec<BinaryOutcome> = truth
            .iter()
            .zip(pred)
            .map(|(t, p)| BinaryOutcome::new(if *p == grade { 1.0 } else { 0.0 }, *t == grade))
            .collect();
        let counts = confusion(&outcomes, 0.5);
        per_class.push(ClassMetrics {
            grade,
            counts,
            metrics: acc_sens_spec_mcc(&counts),
        });
    }
    let k = per_class.len() as f64;
    let avg = |f: fn(&BinaryMetrics) -> f64| per_class.iter().map(|c| f(&c.metrics)).sum::<f64>() / k;
    let macro_avg = BinaryMetrics {
        acc: avg(|m| m.acc),
        sens: avg(|m| m.sens),
        spec: avg(|m| m.spec),
        mcc: avg(|m| m.mcc),
    };
    let exact = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    debug_assert!(per_class.len() + skipped.len() == GRADE_COUNT);
    Ok(SixClassMetrics {
        macro_avg,
        per_class,
        skipped,
        exact_accuracy: exact as f64 / truth.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(score: f64, positive: bool) -> BinaryOutcome {
        BinaryOutcome::new(score, positive)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[o(0.1, false), o(0.9, true)]).unwrap(), 1.0);
        assert_eq!(auc(&[o(0.9, false), o(0.1, true)]).unwrap(), 0.0);
        assert_eq!(auc(&[o(0.5, false), o(0.5, true), o(0.5, true)]).unwrap(), 0.5);
        assert!(matches!(auc(&[o(1.0, true)]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[o(f64::NAN, true), o(0.0, false)]).is_err());
    }

    #[test]
    fn roc_curve_ends_at_one() {
        let data = [o(0.2, false), o(0.4, true), o(0.4, false), o(0.8, true)];
        let curve = roc_curve(&data).unwrap();
        let last = curve.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(trapezoid_auc(&curve), auc(&data).unwrap());
        let best = youden_point(&data).unwrap();
        assert_eq!((best.fpr, best.tpr), (0.0, 0.5));
        assert_eq!(confusion(&data, best.threshold).tp, 1);
    }

    #[test]
    fn confusion_examples() {
        let all_pos: Vec<_> = (0..5).map(|i| o(i as f64 + 1.0, true)).collect();
        assert_eq!(confusion(&all_pos, 0.5).tp, 5);
        let c = confusion(&[o(0.1, true), o(0.2, false)], 1.0);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (0, 0, 1, 1));
    }

    #[test]
    fn binary_metric_examples() {
        let perfect = ConfusionCounts { tp: 50, fp: 0, tn: 50, fn_: 0 };
        let m = acc_sens_spec_mcc(&perfect);
        assert_eq!((m.acc, m.sens, m.spec, m.mcc), (1.0, 1.0, 1.0, 1.0));

        let chance = ConfusionCounts { tp: 25, fp: 25, tn: 25, fn_: 25 };
        let m = acc_sens_spec_mcc(&chance);
        assert_eq!((m.acc, m.mcc), (0.5, 0.0));

        let c = ConfusionCounts { tp: 30, fp: 5, tn: 60, fn_: 5 };
        let m = acc_sens_spec_mcc(&c);
        assert!((m.acc - 0.9).abs() < 1e-15);
        assert_eq!(m.sens, 30.0 / 35.0);
        assert_eq!(m.spec, 60.0 / 65.0);
        let mcc = (30.0 * 60.0 - 25.0) / (35.0f64 * 35.0 * 65.0 * 65.0).sqrt();
        assert!((m.mcc - mcc).abs() < 1e-15);

        let degenerate = ConfusionCounts { tp: 4, fp: 0, tn: 0, fn_: 0 };
        let m = acc_sens_spec_mcc(&degenerate);
        assert_eq!((m.spec, m.mcc), (0.0, 0.0));
    }

    #[test]
    fn six_class_examples() {
        let all: Vec<CadRadsGrade> = CadRadsGrade::all().collect();
        let m = six_class_metrics(&all, &all).unwrap();
        assert_eq!(m.macro_avg, BinaryMetrics { acc: 1.0, sens: 1.0, spec: 1.0, mcc: 1.0 });
        assert!(m.skipped.is_empty());

        let constant = vec![all[2]; 6];
        let m = six_class_metrics(&all, &constant).unwrap();
        for c in &m.per_class {
            assert_eq!(c.metrics.sens, if c.grade == all[2] { 1.0 } else { 0.0 });
        }

        let m = six_class_metrics(&all[..3], &all[..3]).unwrap();
        assert_eq!(m.skipped, all[3..].to_vec());
        assert!(six_class_metrics(&all, &all[..2]).is_err());
    }
}
