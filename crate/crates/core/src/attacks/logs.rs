//! Run log-driven attacks (metric, learning, model-based, sequence) from
//! prediction logs plus a manifest.

use std::collections::HashMap;

use crate::attacks::learn::run_learning_attack;
use crate::attacks::metric::{metric_score, xent_loss};
use crate::attacks::model::{
    build_reference_bank, score_calibration, score_fpr_calibrated, score_model_loss, score_rmia_all,
    scaled_logit, MetricKind, PooledBank, ReferenceBank,
};
use crate::attacks::seq::{neighbor_parent, seq_score, SeqParams, SeqVariant, SequenceRecord};
use crate::attacks::{AttackConfig, AttackId, Paradigm};
use crate::error::{Error, Result};
use crate::record::{
    clamp_prob, join_membership, LabeledRecord, Manifest, ModelEntry, ModelRole, PredictionRecord, SampleIndex,
    ScoreEntry, ScoreSet,
};

/// Score the manifest's target model with `attack`.
///
/// Query-based attacks need a live oracle and are rejected here.
pub fn run_log_attack(
    attack: AttackId,
    records: &[PredictionRecord],
    manifest: &Manifest,
    samples: &SampleIndex,
    config: &AttackConfig,
) -> Result<ScoreSet> {
    config.validate()?;
    manifest.validate()?;
    let target = manifest.target()?;
    let name = attack.name();
    match attack.paradigm() {
        Paradigm::Metric => {
            let variant = attack.metric_variant().expect("metric attack");
            let rows = join_membership(records, manifest, &target.model_id, samples)?;
            score_rows(name, &rows, |r| metric_score(variant, r.record.require_probs()?, r.sample.label))
        }
        Paradigm::Learning => {
            let variant = attack.feature_variant().expect("learning attack");
            let shadow = single_shadow(manifest)?;
            let shadow_rows = join_membership(records, manifest, &shadow.model_id, samples)?;
            let target_rows = join_membership(records, manifest, &target.model_id, samples)?;
            run_learning_attack(name, variant, &shadow_rows, &target_rows, &config.mlp)
        }
        Paradigm::Model => run_model_attack(attack, records, manifest, samples, config),
        Paradigm::Sequence => run_seq_attack(attack, records, manifest, samples, config),
        Paradigm::Query => Err(Error::Capability(format!(
            "{name} issues extra queries and needs a model oracle; prediction logs cannot answer them"
        ))),
    }
}

fn score_rows(name: &str, rows: &[LabeledRecord], mut f: impl FnMut(&LabeledRecord) -> Result<f64>) -> Result<ScoreSet> {
    let entries = rows
        .iter()
        .map(|r| {
            Ok(ScoreEntry {
                sample_id: r.sample.sample_id.clone(),
                score: f(r)?,
                is_member: r.is_member,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(name, entries)
}

fn single_shadow(manifest: &Manifest) -> Result<&ModelEntry> {
    let shadows: Vec<_> = manifest.with_role(ModelRole::Shadow).collect();
    match shadows.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::MissingInput("learning attacks need a shadow model in the manifest".into())),
        _ => Err(Error::validation(
            "models",
            format!("learning attacks use exactly one shadow model, manifest lists {}", shadows.len()),
        )),
    }
}

fn label_of(r: &LabeledRecord) -> Result<usize> {
    r.sample
        .label
        .ok_or_else(|| Error::MissingInput(format!("sample `{}` has no label", r.sample.sample_id)))
}

fn run_model_attack(
    attack: AttackId,
    records: &[PredictionRecord],
    manifest: &Manifest,
    samples: &SampleIndex,
    config: &AttackConfig,
) -> Result<ScoreSet> {
    let name = attack.name();
    let target = manifest.target()?;
    let rows = join_membership(records, manifest, &target.model_id, samples)?;
    let bank = |kind| -> Result<ReferenceBank> { build_reference_bank(manifest, records, kind, samples) };
    match attack {
        AttackId::ModelLoss => {
            let b = bank(MetricKind::Loss)?;
            score_rows(name, &rows, |r| {
                score_model_loss(xent_loss(r.record.require_probs()?, label_of(r)?), b.entry(&r.sample.sample_id)?)
            })
        }
        AttackId::ModelCalibration => {
            let b = bank(MetricKind::Loss)?;
            let pooled = PooledBank::from_bank(&b);
            score_rows(name, &rows, |r| {
                let e = b.entry(&r.sample.sample_id)?;
                score_calibration(xent_loss(r.record.require_probs()?, label_of(r)?), pooled.out_values(e))
            })
        }
        AttackId::ModelLira => {
            let b = bank(MetricKind::ScaledLogit)?;
            let pooled = PooledBank::from_bank(&b);
            score_rows(name, &rows, |r| {
                let phi = scaled_logit(r.record.require_probs()?, label_of(r)?)?;
                pooled.score_lira(phi, b.entry(&r.sample.sample_id)?, config.lira_mode)
            })
        }
        AttackId::ModelFpr => {
            let b = bank(MetricKind::ScaledLogit)?;
            let pooled = PooledBank::from_bank(&b);
            score_rows(name, &rows, |r| {
                let phi = scaled_logit(r.record.require_probs()?, label_of(r)?)?;
                score_fpr_calibrated(phi, pooled.out_values(b.entry(&r.sample.sample_id)?))
            })
        }
        AttackId::ModelRobust => {
            let reference = manifest
                .with_role(ModelRole::Reference)
                .nth(config.robust_reference)
                .ok_or_else(|| {
                    Error::MissingInput(format!("no reference model at index {}", config.robust_reference))
                })?;
            let ref_probs: HashMap<&str, &PredictionRecord> = records
                .iter()
                .filter(|r| r.model_id == reference.model_id)
                .map(|r| (r.sample_id.as_str(), r))
                .collect();
            let pairs = rows
                .iter()
                .map(|r| {
                    let y = label_of(r)?;
                    let rr = ref_probs.get(r.sample.sample_id.as_str()).ok_or_else(|| {
                        Error::MissingInput(format!(
                            "reference `{}` has no record for `{}`",
                            reference.model_id, r.sample.sample_id
                        ))
                    })?;
                    Ok((clamp_prob(r.record.require_probs()?[y]), clamp_prob(rr.require_probs()?[y])))
                })
                .collect::<Result<Vec<_>>>()?;
            let scores = score_rmia_all(&pairs, config.gamma)?;
            let mut it = scores.into_iter();
            score_rows(name, &rows, |_| Ok(it.next().expect("one score per row")))
        }
        _ => unreachable!("not a model-based attack"),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_seq_attack(
    attack: AttackId,
    records: &[PredictionRecord],
    manifest: &Manifest,
    samples: &SampleIndex,
    config: &AttackConfig,
) -> Result<ScoreSet> {
    let variant = attack.seq_variant().expect("sequence attack");
    let target = manifest.target()?;
    let (neighbors, own): (Vec<&PredictionRecord>, Vec<&PredictionRecord>) = records
        .iter()
        .filter(|r| r.model_id == target.model_id)
        .partition(|r| neighbor_parent(&r.sample_id).is_some());

    let mut neighbor_losses: HashMap<&str, Vec<f64>> = HashMap::new();
    if variant == SeqVariant::Neighbor {
        for r in &neighbors {
            let logls = r.token_logls.as_deref().filter(|t| !t.is_empty()).ok_or_else(|| {
                Error::MissingInput(format!("neighbor record `{}` has no token_logls", r.sample_id))
            })?;
            let parent = neighbor_parent(&r.sample_id).expect("partitioned on parent");
            neighbor_losses.entry(parent).or_default().push(-mean(logls));
        }
    }
    let reference: HashMap<&str, &PredictionRecord> = if variant == SeqVariant::Reference {
        let model = manifest
            .with_role(ModelRole::Reference)
            .next()
            .ok_or_else(|| Error::MissingInput("Seq-reference needs a reference model in the manifest".into()))?;
        records
            .iter()
            .filter(|r| r.model_id == model.model_id)
            .map(|r| (r.sample_id.as_str(), r))
            .collect()
    } else {
        HashMap::new()
    };

    let own: Vec<PredictionRecord> = own.into_iter().cloned().collect();
    let rows = join_membership(&own, manifest, &target.model_id, samples)?;
    score_rows(attack.name(), &rows, |r| {
        let mut rec = SequenceRecord::from_prediction(&r.record)?;
        if variant == SeqVariant::Reference {
            rec.ref_token_logls = reference
                .get(rec.sample_id.as_str())
                .and_then(|p| p.token_logls.clone());
        }
        let params = SeqParams {
            k_percent: Some(config.k_percent),
            neighbor_losses: neighbor_losses.get(rec.sample_id.as_str()).map(Vec::as_slice),
        };
        seq_score(variant, &rec, &params)
    })
}
