//! Scores computed from a single target-model prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::clamp_prob;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricVariant {
    Loss,
    Conf,
    Corr,
    Ent,
    Ment,
}

impl MetricVariant {
    pub const ALL: [MetricVariant; 5] = [Self::Loss, Self::Conf, Self::Corr, Self::Ent, Self::Ment];

    pub fn needs_label(self) -> bool {
        matches!(self, Self::Loss | Self::Corr | Self::Ment)
    }
}

pub(crate) fn require_label(label: Option<usize>, probs: &[f64], what: &str) -> Result<usize> {
    let label = label.ok_or_else(|| Error::MissingInput(format!("{what} requires a class label")))?;
    if label >= probs.len() {
        return Err(Error::validation(
            "label",
            format!("label {label} out of range for {} classes", probs.len()),
        ));
    }
    Ok(label)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy loss `-ln p[label]` with the probability floor applied.
pub fn xent_loss(probs: &[f64], label: usize) -> f64 {
    -clamp_prob(probs[label]).ln()
}

/// `sum_i p_i ln p_i`, i.e. negative entropy.
pub fn neg_entropy(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| p * clamp_prob(p).ln()).sum()
}

/// Modified prediction entropy (non-negative; zero for a confident correct
/// prediction).
pub fn modified_entropy(probs: &[f64], label: usize) -> f64 {
    let mut m = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        let pc = clamp_prob(p);
        if i == label {
            m -= (1.0 - pc) * pc.ln();
        } else {
            m -= pc * (1.0 - pc).ln();
        }
    }
    m
}

/// Member-oriented score (higher = more likely a training sample).
pub fn metric_score(variant: MetricVariant, probs: &[f64], label: Option<usize>) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::validation("probs", "empty probability vector"));
    }
    Ok(match variant {
        MetricVariant::Loss => -xent_loss(probs, require_label(label, probs, "metric loss")?),
        MetricVariant::Conf => probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        MetricVariant::Corr => {
            let y = require_label(label, probs, "metric corr")?;
            if argmax(probs) == y {
                1.0
            } else {
                0.0
            }
        }
        MetricVariant::Ent => neg_entropy(probs),
        MetricVariant::Ment => -modified_entropy(probs, require_label(label, probs, "metric ment")?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::PROB_EPS;
    use proptest::prelude::*;

    #[test]
    fn uniform_entropy() {
        let s = metric_score(MetricVariant::Ent, &[0.25; 4], None).unwrap();
        assert!((s + 4f64.ln()).abs() < 1e-12);
        assert!((s + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn ment_of_confident_correct_prediction_is_zero() {
        let s = metric_score(MetricVariant::Ment, &[0.0, 1.0, 0.0], Some(1)).unwrap();
        assert!(s <= 0.0 && s.abs() < 1e-20, "{s}");
    }

    #[test]
    fn loss_example() {
        let s = metric_score(MetricVariant::Loss, &[0.7, 0.2, 0.1], Some(0)).unwrap();
        // -(cross-entropy) = ln 0.7
        assert!((s - (-0.356_674_943_938_732_4)).abs() < 1e-12);
    }

    #[test]
    fn corr_mismatch() {
        assert_eq!(metric_score(MetricVariant::Corr, &[0.4, 0.6], Some(0)).unwrap(), 0.0);
        assert_eq!(metric_score(MetricVariant::Corr, &[0.4, 0.6], Some(1)).unwrap(), 1.0);
    }

    #[test]
    fn label_errors() {
        assert!(matches!(
            metric_score(MetricVariant::Loss, &[0.5, 0.5], None),
            Err(Error::MissingInput(_))
        ));
        assert!(metric_score(MetricVariant::Ment, &[0.5, 0.5], Some(2)).is_err());
        // conf and ent need no label.
        metric_score(MetricVariant::Conf, &[0.5, 0.5], None).unwrap();
    }

    /// Independent, loop-free transcription of the modified entropy.
    fn mentr_oracle(p: &[f64], y: usize) -> f64 {
        let c = |v: f64| v.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let own = -(1.0 - c(p[y])) * c(p[y]).ln();
        let others: f64 = (0..p.len())
            .filter(|&i| i != y)
            .map(|i| -c(p[i]) * (1.0 - c(p[i])).ln())
            .sum();
        own + others
    }

    fn probs_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (2usize..12).prop_flat_map(|k| {
            (proptest::collection::vec(0.0f64..1.0, k), 0..k).prop_map(|(raw, y)| {
                let raw: Vec<f64> = raw.into_iter().map(|v| v * v * v + 1e-9).collect();
                let s: f64 = raw.iter().sum();
                (raw.into_iter().map(|v| v / s).collect(), y)
            })
        })
    }

    proptest! {
        #[test]
        fn bounds((p, y) in probs_strategy()) {
            let k = p.len() as f64;
            prop_assert!(metric_score(MetricVariant::Ment, &p, Some(y)).unwrap() <= 0.0);
            prop_assert!(metric_score(MetricVariant::Ent, &p, None).unwrap() <= 0.0);
            let c = metric_score(MetricVariant::Corr, &p, Some(y)).unwrap();
            prop_assert!(c == 0.0 || c == 1.0);
            let conf = metric_score(MetricVariant::Conf, &p, None).unwrap();
            prop_assert!(conf >= 1.0 / k - 1e-12 && conf <= 1.0);
        }

        #[test]
        fn ment_matches_oracle((p, y) in probs_strategy()) {
            let s = metric_score(MetricVariant::Ment, &p, Some(y)).unwrap();
            let o = mentr_oracle(&p, y);
            prop_assert!((s + o).abs() <= 1e-12 * o.abs().max(1.0));
        }

        #[test]
        fn binary_ment_and_loss_agree_on_correct_predictions(
            a in 0.5001f64..0.9999, b in 0.5001f64..0.9999
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            // Both samples correctly predicted with label 0.
            let pa = [a, 1.0 - a];
            let pb = [b, 1.0 - b];
            let la = metric_score(MetricVariant::Loss, &pa, Some(0)).unwrap();
            let lb = metric_score(MetricVariant::Loss, &pb, Some(0)).unwrap();
            let ma = metric_score(MetricVariant::Ment, &pa, Some(0)).unwrap();
            let mb = metric_score(MetricVariant::Ment, &pb, Some(0)).unwrap();
            prop_assert_eq!(la.partial_cmp(&lb), ma.partial_cmp(&mb));
        }
    }
}
