//! ROC construction and the evaluation metrics reported per attack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::ScoreSet;

/// ROC curve from (0,0) to (1,1), one point per distinct score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs.
    pub points: Vec<(f64, f64)>,
    /// `thresholds[i]` is the score threshold (predict member iff
    /// `score >= threshold`) realizing `points[i]`; the first is `+inf`.
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub fnr: f64,
    pub fpr: f64,
    /// Membership advantage, `recall - fpr`.
    pub ma: f64,
}

fn class_counts(scores: &ScoreSet) -> Result<(usize, usize)> {
    let pos = scores.num_members();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "`{}` has {pos} members and {neg} non-members",
            scores.attack_name
        )));
    }
    Ok((pos, neg))
}

/// Sweep thresholds from high to low, one point per distinct score.
pub fn roc_curve(scores: &ScoreSet) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.entries.iter().map(|e| (e.score, e.is_member)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under the curve.
pub fn auroc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Convenience: `auroc(roc_curve(scores))`.
pub fn auroc_of(scores: &ScoreSet) -> Result<f64> {
    Ok(auroc(&roc_curve(scores)?))
}

/// TPR at FPR = `alpha`, interpolating linearly along the segment that
/// crosses `alpha`.
pub fn tpr_at_fpr(curve: &RocCurve, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut best: f64 = 0.0;
    for w in curve.points.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if f0 > alpha {
            break;
        }
        if f1 <= alpha {
            best = best.max(t1);
        } else {
            let frac = (alpha - f0) / (f1 - f0);
            best = best.max(t0 + frac * (t1 - t0));
        }
    }
    Ok(best)
}

/// Confusion metrics when predicting member iff `score >= threshold`.
pub fn confusion_at_threshold(scores: &ScoreSet, threshold: f64) -> Result<ConfusionMetrics> {
    let (pos, neg) = class_counts(scores)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for e in &scores.entries {
        if e.score >= threshold {
            if e.is_member {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let tn = neg - fp;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    // recall is derived from fnr so that recall == 1 - fnr holds exactly.
    let fnr = (pos - tp) as f64 / pos as f64;
    let recall = 1.0 - fnr;
    let fpr = fp as f64 / neg as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ConfusionMetrics {
        precision,
        recall,
        f1,
        accuracy: (tp + tn) as f64 / (pos + neg) as f64,
        fnr,
        fpr,
        ma: recall - fpr,
    })
}

/// Threshold maximizing balanced accuracy on a calibration set.
///
/// Candidates are the lowest score and the midpoints between adjacent
/// distinct scores; ties go to the larger threshold.
pub fn select_threshold(calibration: &ScoreSet) -> Result<f64> {
    let (pos, neg) = class_counts(calibration)?;
    let mut sorted: Vec<(f64, bool)> = calibration.entries.iter().map(|e| (e.score, e.is_member)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ascending sweep: at threshold t, everything below t is predicted
    // non-member.
    let mut best_t = sorted[0].0;
    let mut best_ba = 0.5;
    let (mut fn_, mut tn) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let t = s + (sorted[i].0 - s) / 2.0;
        let tpr = (pos - fn_) as f64 / pos as f64;
        let tnr = tn as f64 / neg as f64;
        let ba = (tpr + tnr) / 2.0;
        if ba >= best_ba {
            best_ba = ba;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// One repeat's metrics, keyed by metric name.
pub type MetricTable = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-key sample mean and sample standard deviation (n - 1).
pub fn aggregate_repeats(per_seed: &[MetricTable]) -> Result<BTreeMap<String, MeanStd>> {
    if per_seed.len() < 2 {
        return Err(Error::config(format!(
            "aggregation needs at least 2 repeats, got {}",
            per_seed.len()
        )));
    }
    let keys: Vec<&String> = per_seed[0].keys().collect();
    for (i, t) in per_seed.iter().enumerate().skip(1) {
        if t.keys().ne(keys.iter().copied()) {
            return Err(Error::validation(
                "metrics",
                format!("repeat {i} has metric keys that differ from repeat 0"),
            ));
        }
    }
    let n = per_seed.len() as f64;
    Ok(keys
        .into_iter()
        .map(|k| {
            let vals: Vec<f64> = per_seed.iter().map(|t| t[k]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (k.clone(), MeanStd { mean, std: var.sqrt() })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::ScoreEntry;
    use proptest::prelude::*;

    fn set(members: &[f64], nonmembers: &[f64]) -> ScoreSet {
        let mut entries = Vec::new();
        for (i, &s) in members.iter().enumerate() {
            entries.push(ScoreEntry { sample_id: format!("m{i}"), score: s, is_member: true });
        }
        for (i, &s) in nonmembers.iter().enumerate() {
            entries.push(ScoreEntry { sample_id: format!("n{i}"), score: s, is_member: false });
        }
        ScoreSet::new("t", entries).unwrap()
    }

    /// Independent oracle: P(member > non-member) + 1/2 P(tie).
    fn pairwise_auc(s: &ScoreSet) -> f64 {
        let m: Vec<f64> = s.entries.iter().filter(|e| e.is_member).map(|e| e.score).collect();
        let n: Vec<f64> = s.entries.iter().filter(|e| !e.is_member).map(|e| e.score).collect();
        let mut acc = 0.0;
        for a in &m {
            for b in &n {
                acc += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        acc / (m.len() * n.len()) as f64
    }

    /// Independent oracle: (fpr, tpr) for every threshold among the scores.
    fn brute_points(s: &ScoreSet) -> Vec<(f64, f64)> {
        let mut ts: Vec<f64> = s.entries.iter().map(|e| e.score).collect();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let pos = s.num_members() as f64;
        let neg = s.len() as f64 - pos;
        let mut out = vec![(0.0, 0.0)];
        for t in ts {
            let tp = s.entries.iter().filter(|e| e.is_member && e.score >= t).count() as f64;
            let fp = s.entries.iter().filter(|e| !e.is_member && e.score >= t).count() as f64;
            out.push((fp / neg, tp / pos));
        }
        out
    }

    fn four_point() -> ScoreSet {
        set(&[0.35, 0.8], &[0.1, 0.4])
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[1.0, 1.0, 1.0], &[0.0, 0.0]);
        let c = roc_curve(&s).unwrap();
        assert!(c.points.contains(&(0.0, 1.0)));
        assert_eq!(auroc(&c), 1.0);
        assert_eq!(tpr_at_fpr(&c, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn identical_scores_give_diagonal() {
        let s = set(&[0.3; 5], &[0.3; 7]);
        let c = roc_curve(&s).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auroc(&c), 0.5);
        assert!((tpr_at_fpr(&c, 0.10).unwrap() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn four_point_example_matches_enumeration() {
        let s = four_point();
        let c = roc_curve(&s).unwrap();
        assert_eq!(c.points, brute_points(&s));
        assert_eq!(c.points, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auroc(&c), 0.75);
        assert_eq!(pairwise_auc(&s), 0.75);
        // Brute-force scan: best TPR over thresholds whose FPR <= 0.5.
        let scan = brute_points(&s)
            .into_iter()
            .filter(|(f, _)| *f <= 0.5)
            .map(|(_, t)| t)
            .fold(0.0, f64::max);
        assert_eq!(tpr_at_fpr(&c, 0.5).unwrap(), scan);
        assert_eq!(scan, 1.0);
    }

    #[test]
    fn tpr_at_fpr_rejects_bad_alpha() {
        let c = roc_curve(&four_point()).unwrap();
        assert!(tpr_at_fpr(&c, 0.0).is_err());
        assert!(tpr_at_fpr(&c, 1.0).is_err());
    }

    #[test]
    fn single_class_is_degenerate() {
        let s = set(&[0.1, 0.2], &[]);
        assert!(matches!(roc_curve(&s).unwrap_err(), Error::DegenerateLabels(_)));
        assert!(select_threshold(&s).is_err());
    }

    #[test]
    fn confusion_examples() {
        // 9 of 10 members and 6 of 10 non-members above 0.5.
        let mut m = vec![0.9; 9];
        m.push(0.1);
        let mut n = vec![0.9; 6];
        n.extend([0.1; 4]);
        let c = confusion_at_threshold(&set(&m, &n), 0.5).unwrap();
        assert!((c.recall - 0.9).abs() < 1e-12);
        assert!((c.fpr - 0.6).abs() < 1e-12);
        assert!((c.ma - 0.3).abs() < 1e-12);

        let c = confusion_at_threshold(&four_point(), -1.0).unwrap();
        assert_eq!((c.recall, c.fnr, c.fpr), (1.0, 0.0, 1.0));

        // Hand enumeration: at 0.375 the predicted members are 0.8 (member)
        // and 0.4 (non-member); at 0.6 only 0.8.
        let c = confusion_at_threshold(&four_point(), 0.375).unwrap();
        assert_eq!((c.precision, c.recall), (0.5, 0.5));
        let c = confusion_at_threshold(&four_point(), 0.6).unwrap();
        assert_eq!((c.precision, c.recall), (1.0, 0.5));
    }

    #[test]
    fn f1_zero_when_nothing_predicted() {
        let c = confusion_at_threshold(&four_point(), 10.0).unwrap();
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
    }

    fn balanced_accuracy(s: &ScoreSet, t: f64) -> f64 {
        let c = confusion_at_threshold(s, t).unwrap();
        (c.recall + 1.0 - c.fpr) / 2.0
    }

    #[test]
    fn threshold_between_separated_classes() {
        let s = set(&[0.8, 0.9], &[0.0, 0.1]);
        let t = select_threshold(&s).unwrap();
        assert!(t > 0.1 && t < 0.8, "{t}");
    }

    #[test]
    fn threshold_of_identical_scores() {
        assert_eq!(select_threshold(&set(&[0.4; 3], &[0.4; 3])).unwrap(), 0.4);
    }

    #[test]
    fn four_point_threshold_matches_scan() {
        let s = four_point();
        let t = select_threshold(&s).unwrap();
        // Exhaustive scan over a fine grid.
        let best = (0..=1000)
            .map(|i| balanced_accuracy(&s, i as f64 / 1000.0))
            .fold(0.0, f64::max);
        assert_eq!(balanced_accuracy(&s, t), best);
        assert_eq!(best, 0.75);
        // Two thresholds reach 0.75 (0.225 and 0.6); the larger wins.
        assert!((t - 0.6).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let table = |v: f64| MetricTable::from([("auroc".to_string(), v)]);
        let agg = aggregate_repeats(&[table(0.6), table(0.6), table(0.6)]).unwrap();
        assert!((agg["auroc"].mean - 0.6).abs() < 1e-12);
        assert!(agg["auroc"].std.abs() < 1e-12);

        let agg = aggregate_repeats(&[table(0.5), table(0.7)]).unwrap();
        assert!((agg["auroc"].mean - 0.6).abs() < 1e-12);
        assert!((agg["auroc"].std - 0.02f64.sqrt()).abs() < 1e-12);

        assert!(aggregate_repeats(&[table(0.5)]).is_err());
        let other = MetricTable::from([("tpr".to_string(), 0.1)]);
        assert!(aggregate_repeats(&[table(0.5), other]).is_err());
    }

    fn score_set_strategy() -> impl Strategy<Value = ScoreSet> {
        // Coarse scores so ties are common.
        (1usize..100, 1usize..100).prop_flat_map(|(m, n)| {
            (
                proptest::collection::vec(0i32..20, m),
                proptest::collection::vec(0i32..20, n),
            )
                .prop_map(|(a, b)| {
                    let a: Vec<f64> = a.into_iter().map(|x| x as f64 / 4.0).collect();
                    let b: Vec<f64> = b.into_iter().map(|x| x as f64 / 4.0).collect();
                    set(&a, &b)
                })
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise(s in score_set_strategy()) {
            let a = auroc_of(&s).unwrap();
            prop_assert!((a - pairwise_auc(&s)).abs() < 1e-12);
        }

        #[test]
        fn auroc_invariant_under_monotone_map(s in score_set_strategy()) {
            let mut t = s.clone();
            for e in &mut t.entries {
                e.score = (e.score * 0.7).exp() - 3.0;
            }
            prop_assert!((auroc_of(&s).unwrap() - auroc_of(&t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn roc_is_monotone(s in score_set_strategy()) {
            let c = roc_curve(&s).unwrap();
            prop_assert_eq!(c.points[0], (0.0, 0.0));
            prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
            for w in c.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert_eq!(c.points.len(), c.thresholds.len());
        }

        #[test]
        fn confusion_identities(s in score_set_strategy(), t in -1.0f64..6.0) {
            let c = confusion_at_threshold(&s, t).unwrap();
            prop_assert_eq!(c.recall, 1.0 - c.fnr);
            prop_assert_eq!(c.ma, c.recall - c.fpr);
        }
    }
}
