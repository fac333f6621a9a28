//! Prediction logs, manifests and membership ground truth.
//!
//! A prediction log is JSONL, one [`PredictionRecord`] per line. A
//! [`Manifest`] says which samples trained which model. Joining the two gives
//! the labeled tables every attack consumes.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance on probability-vector normalization.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Tolerance between a cached loss and the loss recomputed from `probs`.
pub const LOSS_TOL: f64 = 1e-6;

/// Clamp a probability into `[PROB_EPS, 1 - PROB_EPS]`.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// A data point: its id and, for classification data, its true class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Lookup table of the samples in a dataset.
#[derive(Clone, Debug, Default)]
pub struct SampleIndex {
    by_id: HashMap<String, SampleRef>,
    num_classes: Option<usize>,
}

impl SampleIndex {
    pub fn new(samples: impl IntoIterator<Item = SampleRef>, num_classes: Option<usize>) -> Result<Self> {
        let mut by_id = HashMap::new();
        for s in samples {
            if let (Some(label), Some(k)) = (s.label, num_classes) {
                if label >= k {
                    return Err(Error::validation(
                        "label",
                        format!("sample `{}` has label {label} but there are {k} classes", s.sample_id),
                    ));
                }
            }
            if by_id.insert(s.sample_id.clone(), s.clone()).is_some() {
                return Err(Error::validation(
                    "sample_id",
                    format!("duplicate sample id `{}`", s.sample_id),
                ));
            }
        }
        Ok(Self { by_id, num_classes })
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRef> {
        self.by_id.get(sample_id)
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.by_id.contains_key(sample_id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }
}

/// One model's output on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub model_id: String,
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logls: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Raw sample bytes (sequence data), base64 on the wire.
    #[serde(
        default,
        rename = "raw_b64",
        skip_serializing_if = "Option::is_none",
        with = "b64_opt"
    )]
    pub raw_bytes: Option<Vec<u8>>,
}

mod b64_opt {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_str(&B64.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<u8>>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        s.map(|s| B64.decode(s.as_bytes()).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl PredictionRecord {
    pub fn with_probs(model_id: impl Into<String>, sample_id: impl Into<String>, probs: Vec<f64>) -> Self {
        Self {
            model_id: model_id.into(),
            sample_id: sample_id.into(),
            probs: Some(probs),
            token_logls: None,
            loss: None,
            raw_bytes: None,
        }
    }

    pub fn with_token_logls(
        model_id: impl Into<String>,
        sample_id: impl Into<String>,
        token_logls: Vec<f64>,
        raw_bytes: Option<Vec<u8>>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            sample_id: sample_id.into(),
            probs: None,
            token_logls: Some(token_logls),
            loss: None,
            raw_bytes,
        }
    }

    /// Check the record-local invariants.
    pub fn validate(&self) -> Result<()> {
        match (&self.probs, &self.token_logls) {
            (Some(_), Some(_)) => {
                return Err(Error::validation(
                    "probs",
                    "record carries both probs and token_logls",
                ))
            }
            (None, None) => {
                return Err(Error::validation(
                    "probs",
                    "record carries neither probs nor token_logls",
                ))
            }
            _ => {}
        }
        if let Some(probs) = &self.probs {
            validate_probs(probs)?;
        }
        if let Some(logls) = &self.token_logls {
            if logls.is_empty() {
                return Err(Error::validation("token_logls", "empty token list"));
            }
            if let Some(v) = logls.iter().find(|v| !v.is_finite() || **v > 0.0) {
                return Err(Error::validation(
                    "token_logls",
                    format!("entry {v} is not a finite log-likelihood <= 0"),
                ));
            }
        }
        if let Some(loss) = self.loss {
            if !loss.is_finite() || loss < 0.0 {
                return Err(Error::validation("loss", format!("loss {loss} is negative or not finite")));
            }
        }
        Ok(())
    }

    /// Probability vector, or an error naming the record.
    pub fn require_probs(&self) -> Result<&[f64]> {
        self.probs.as_deref().ok_or_else(|| {
            Error::MissingInput(format!(
                "record ({}, {}) has no probability vector",
                self.model_id, self.sample_id
            ))
        })
    }

    /// Check the cached loss against `-ln probs[label]`.
    pub fn check_cached_loss(&self, label: usize) -> Result<()> {
        let (Some(loss), Some(probs)) = (self.loss, &self.probs) else {
            return Ok(());
        };
        let p = probs.get(label).copied().ok_or(Error::Dimension {
            expected: label + 1,
            actual: probs.len(),
        })?;
        let expected = -clamp_prob(p).ln();
        if (expected - loss).abs() > LOSS_TOL {
            return Err(Error::validation(
                "loss",
                format!(
                    "cached loss {loss} for ({}, {}) disagrees with -ln p[label] = {expected}",
                    self.model_id, self.sample_id
                ),
            ));
        }
        Ok(())
    }
}

/// Validate a probability vector: entries in [0,1], sum 1 within tolerance.
pub fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::validation("probs", "empty probability vector"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::validation("probs", format!("entry {p} outside [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::validation("probs", format!("probs sum {}", round_for_display(sum))));
    }
    Ok(())
}

fn round_for_display(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Read and validate a JSONL prediction log.
pub fn load_prediction_log(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_prediction_log(BufReader::new(file), &path.display().to_string())
}

/// Parse a prediction log from any reader; `origin` labels error messages.
pub fn parse_prediction_log(reader: impl BufRead, origin: &str) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("{origin}:{lineno}: {message}"),
            },
            other => other,
        })?;
        if !seen.insert((record.model_id.clone(), record.sample_id.clone())) {
            return Err(Error::validation(
                "sample_id",
                format!(
                    "{origin}:{lineno}: duplicate record for model `{}` sample `{}`",
                    record.model_id, record.sample_id
                ),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

/// Write records as JSONL.
pub fn write_prediction_log(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Target,
    Reference,
    Shadow,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub role: ModelRole,
    pub arch_tag: String,
    pub trained_on: BTreeSet<String>,
}

/// Which samples trained which model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_id: String,
    pub models: Vec<ModelEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self.models.iter().filter(|m| m.role == ModelRole::Target).count();
        if targets != 1 {
            return Err(Error::validation(
                "models",
                format!("manifest must contain exactly one target model, found {targets}"),
            ));
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(m.model_id.as_str()) {
                return Err(Error::validation("model_id", format!("duplicate model id `{}`", m.model_id)));
            }
        }
        Ok(())
    }

    /// Additionally require every `trained_on` id to be a known sample.
    pub fn validate_against(&self, samples: &SampleIndex) -> Result<()> {
        self.validate()?;
        for m in &self.models {
            if let Some(id) = m.trained_on.iter().find(|id| !samples.contains(id)) {
                return Err(Error::validation(
                    "trained_on",
                    format!("model `{}` lists unknown sample `{id}`", m.model_id),
                ));
            }
        }
        Ok(())
    }

    pub fn model(&self, model_id: &str) -> Result<&ModelEntry> {
        self.models
            .iter()
            .find(|m| m.model_id == model_id)
            .ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }

    pub fn target(&self) -> Result<&ModelEntry> {
        self.models
            .iter()
            .find(|m| m.role == ModelRole::Target)
            .ok_or_else(|| Error::validation("models", "manifest has no target model"))
    }

    pub fn with_role(&self, role: ModelRole) -> impl Iterator<Item = &ModelEntry> {
        self.models.iter().filter(move |m| m.role == role)
    }
}

/// A prediction joined with its sample and membership status.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecord {
    pub sample: SampleRef,
    pub record: PredictionRecord,
    pub is_member: bool,
}

/// Join a model's predictions with membership ground truth from the manifest.
///
/// Rows come back in the order the records appear in `records`.
pub fn join_membership(
    records: &[PredictionRecord],
    manifest: &Manifest,
    model_id: &str,
    samples: &SampleIndex,
) -> Result<Vec<LabeledRecord>> {
    let model = manifest.model(model_id)?;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for r in records.iter().filter(|r| r.model_id == model_id) {
        let sample = samples
            .get(&r.sample_id)
            .ok_or_else(|| Error::UnknownSample(r.sample_id.clone()))?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(Error::validation(
                "sample_id",
                format!("duplicate record for model `{model_id}` sample `{}`", r.sample_id),
            ));
        }
        if let Some(label) = sample.label {
            r.check_cached_loss(label)?;
        }
        rows.push(LabeledRecord {
            sample: sample.clone(),
            record: r.clone(),
            is_member: model.trained_on.contains(&r.sample_id),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    pub score: f64,
    pub is_member: bool,
}

/// How a raw attack statistic relates to membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    HigherIsMember,
    LowerIsMember,
}

/// Per-sample membership scores from one attack. Higher always means
/// "more likely a member".
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub attack_name: String,
    pub entries: Vec<ScoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    attack: String,
    sample_id: String,
    score: f64,
    is_member: bool,
}

impl ScoreSet {
    pub fn new(attack_name: impl Into<String>, entries: Vec<ScoreEntry>) -> Result<Self> {
        Self::with_orientation(attack_name, entries, Orientation::HigherIsMember)
    }

    pub fn with_orientation(
        attack_name: impl Into<String>,
        mut entries: Vec<ScoreEntry>,
        orientation: Orientation,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &mut entries {
            if !e.score.is_finite() {
                return Err(Error::validation(
                    "score",
                    format!("score for `{}` is not finite", e.sample_id),
                ));
            }
            if !seen.insert(e.sample_id.clone()) {
                return Err(Error::validation(
                    "sample_id",
                    format!("duplicate score for `{}`", e.sample_id),
                ));
            }
            if orientation == Orientation::LowerIsMember {
                e.score = -e.score;
            }
        }
        Ok(Self {
            attack_name: attack_name.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_members(&self) -> usize {
        self.entries.iter().filter(|e| e.is_member).count()
    }

    /// Entries whose ids are in `ids`, keeping the attack name.
    pub fn subset(&self, ids: &HashSet<&str>) -> ScoreSet {
        ScoreSet {
            attack_name: self.attack_name.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| ids.contains(e.sample_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = ScoreLine {
                attack: self.attack_name.clone(),
                sample_id: e.sample_id.clone(),
                score: e.score,
                is_member: e.is_member,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut name: Option<String> = None;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            match &name {
                None => name = Some(parsed.attack.clone()),
                Some(n) if *n != parsed.attack => {
                    return Err(Error::validation(
                        "attack",
                        format!("line {}: mixes attacks `{n}` and `{}`", idx + 1, parsed.attack),
                    ))
                }
                _ => {}
            }
            entries.push(ScoreEntry {
                sample_id: parsed.sample_id,
                score: parsed.score,
                is_member: parsed.is_member,
            });
        }
        ScoreSet::new(name.unwrap_or_default(), entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<PredictionRecord>> {
        parse_prediction_log(text.as_bytes(), "mem")
    }

    fn index(ids: &[&str]) -> SampleIndex {
        SampleIndex::new(
            ids.iter().map(|id| SampleRef {
                sample_id: id.to_string(),
                label: Some(0),
            }),
            Some(2),
        )
        .unwrap()
    }

    fn manifest() -> Manifest {
        Manifest {
            dataset_id: "d".into(),
            models: vec![ModelEntry {
                model_id: "t0".into(),
                role: ModelRole::Target,
                arch_tag: "logreg".into(),
                trained_on: ["s1".to_string()].into_iter().collect(),
            }],
        }
    }

    #[test]
    fn well_formed_line() {
        let recs = parse(r#"{"model_id":"t0","sample_id":"s1","probs":[0.7,0.3]}"#).unwrap();
        assert_eq!(recs.len(), 1);
        let sum: f64 = recs[0].probs.as_ref().unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probs_must_sum_to_one() {
        let err = parse(r#"{"model_id":"t0","sample_id":"s1","probs":[0.7,0.4]}"#).unwrap_err();
        match err {
            Error::Validation { field, message } => {
                assert_eq!(field, "probs");
                assert!(message.contains("probs sum 1.1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probs_and_logls_are_exclusive() {
        let err = parse(r#"{"model_id":"t0","sample_id":"s1","probs":[1.0],"token_logls":[-1.0]}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn positive_logl_rejected() {
        let err = parse(r#"{"model_id":"t0","sample_id":"s1","token_logls":[-1.0, 0.5]}"#).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "token_logls"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"model_id\":\"t0\",\"sample_id\":\"s1\",\"probs\":[1.0]}\n{not json}\n";
        match parse(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let text = "{\"model_id\":\"t0\",\"sample_id\":\"s1\",\"probs\":[1.0]}\n\
                    {\"model_id\":\"t0\",\"sample_id\":\"s1\",\"probs\":[1.0]}\n";
        assert!(matches!(parse(text).unwrap_err(), Error::Validation { .. }));
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let err = parse(r#"{"model_id":"t0","sample_id":"s1","probs":[1.0],"bogus":1}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn join_sets_membership_from_trained_on() {
        let recs = vec![
            PredictionRecord::with_probs("t0", "s1", vec![0.9, 0.1]),
            PredictionRecord::with_probs("t0", "s2", vec![0.4, 0.6]),
        ];
        let rows = join_membership(&recs, &manifest(), "t0", &index(&["s1", "s2"])).unwrap();
        assert!(rows[0].is_member);
        assert!(!rows[1].is_member);
    }

    #[test]
    fn join_unknown_model_fails() {
        let recs = vec![PredictionRecord::with_probs("t9", "s1", vec![1.0, 0.0])];
        let err = join_membership(&recs, &manifest(), "t9", &index(&["s1"])).unwrap_err();
        assert!(matches!(err, Error::UnknownModel(ref m) if m == "t9"));
    }

    #[test]
    fn join_unknown_sample_fails() {
        let recs = vec![PredictionRecord::with_probs("t0", "s7", vec![1.0, 0.0])];
        let err = join_membership(&recs, &manifest(), "t0", &index(&["s1"])).unwrap_err();
        assert!(matches!(err, Error::UnknownSample(_)));
    }

    #[test]
    fn inconsistent_cached_loss_rejected() {
        let mut rec = PredictionRecord::with_probs("t0", "s1", vec![0.5, 0.5]);
        rec.loss = Some(0.1);
        let err = join_membership(&[rec.clone()], &manifest(), "t0", &index(&["s1"])).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "loss"));
        rec.loss = Some(std::f64::consts::LN_2);
        join_membership(&[rec], &manifest(), "t0", &index(&["s1"])).unwrap();
    }

    #[test]
    fn manifest_needs_exactly_one_target() {
        let mut m = manifest();
        m.models[0].role = ModelRole::Reference;
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.models.push(ModelEntry {
            model_id: "t1".into(),
            role: ModelRole::Target,
            arch_tag: "x".into(),
            trained_on: BTreeSet::new(),
        });
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_unknown_trained_on_rejected() {
        let m = manifest();
        assert!(m.validate_against(&index(&["s2"])).is_err());
        m.validate_against(&index(&["s1"])).unwrap();
    }

    #[test]
    fn score_set_orientation_and_duplicates() {
        let entries = vec![
            ScoreEntry { sample_id: "a".into(), score: 1.0, is_member: true },
            ScoreEntry { sample_id: "b".into(), score: 2.0, is_member: false },
        ];
        let s = ScoreSet::with_orientation("x", entries.clone(), Orientation::LowerIsMember).unwrap();
        assert_eq!(s.entries[0].score, -1.0);
        let mut dup = entries;
        dup[1].sample_id = "a".into();
        assert!(ScoreSet::new("x", dup).is_err());
    }
}
