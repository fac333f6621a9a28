//! End-to-end experiment runs: split, train, log, attack, evaluate and
//! aggregate over repeats.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::logs::run_log_attack;
use crate::attacks::query::{
    run_query_adv, run_query_augment, run_query_neighbor, run_query_qrm, run_query_ref, run_query_transfer,
    QuerySample, ReferenceModel,
};
use crate::attacks::seq::COMPRESSOR_ID;
use crate::attacks::{AttackConfig, AttackId, Paradigm};
use crate::error::{Error, Result};
use crate::eval::{self, aggregate_repeats, MeanStd, MetricTable};
use crate::harness::dataset::{ingest_csv, seq_fixture, synth_dataset, CsvSchema, Dataset, SeqFixtureSpec, SynthSpec};
use crate::harness::report::{Diagnostic, Report, ReportRow, TARGET_MODEL_ROW};
use crate::harness::split::{plan_splits, SplitPlan, DEFAULT_NUM_REFERENCE_MODELS};
use crate::oracle::{Capability, ModelOracle};
use crate::record::{Manifest, ModelEntry, ModelRole, PredictionRecord, SampleIndex, ScoreSet};
use crate::zoo::{self, BuiltinModel, EarlyStop, ModelKind, OverfitSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synth(SynthSpec),
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
        /// Keep only the first `max_rows` rows.
        #[serde(default)]
        max_rows: Option<usize>,
    },
    Seq(SeqFixtureSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub train: TrainConfig,
    /// When set, epochs and weight decay come from the overfit schedule.
    pub overfit_level: Option<f64>,
    pub schedule: OverfitSchedule,
    pub early_stop: Option<EarlyStop>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            train: TrainConfig::default(),
            overfit_level: None,
            schedule: OverfitSchedule::default(),
            early_stop: None,
        }
    }
}

impl ModelSpec {
    pub fn resolved(&self) -> Result<TrainConfig> {
        let mut cfg = match self.overfit_level {
            Some(level) => zoo::overfit_knob_with(&self.schedule, &self.train, level)?,
            None => self.train.clone(),
        };
        if self.early_stop.is_some() {
            cfg.early_stop = self.early_stop;
        }
        Ok(cfg)
    }
}

fn default_repeats() -> usize {
    5
}

fn default_num_reference_models() -> usize {
    DEFAULT_NUM_REFERENCE_MODELS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelSpec,
    pub attacks: Vec<String>,
    #[serde(default)]
    pub attack_config: AttackConfig,
    #[serde(default = "default_num_reference_models")]
    pub num_reference_models: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Directory for report files.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Load a JSON spec; a relative CSV path is taken relative to the spec.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if let DatasetSource::Csv { path: csv, .. } = &mut spec.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(spec)
    }

    /// Resolve attack names and check the spec before any work is done.
    pub fn validate(&self) -> Result<Vec<AttackId>> {
        if self.repeats == 0 {
            return Err(Error::validation("repeats", "must be at least 1"));
        }
        if self.attacks.is_empty() {
            return Err(Error::validation("attacks", "no attacks named"));
        }
        let ids = self
            .attacks
            .iter()
            .map(|n| n.parse::<AttackId>())
            .collect::<Result<Vec<_>>>()?;
        let unique: BTreeSet<AttackId> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::validation("attacks", "an attack is named twice"));
        }
        let seq = matches!(self.dataset, DatasetSource::Seq(_));
        if let Some(bad) = ids.iter().find(|a| (a.paradigm() == Paradigm::Sequence) != seq) {
            return Err(Error::validation(
                "attacks",
                format!(
                    "{bad} does not apply to a {} dataset",
                    if seq { "sequence" } else { "tabular" }
                ),
            ));
        }
        if ids.iter().any(|a| needs_references(*a)) && self.num_reference_models == 0 {
            return Err(Error::validation("num_reference_models", "reference-based attacks need at least one"));
        }
        self.attack_config
            .validate()
            .map_err(|e| Error::validation("attack_config", e.to_string()))?;
        if let Some(level) = self.model.overfit_level {
            if !(0.0..=1.0).contains(&level) {
                return Err(Error::validation("model.overfit_level", format!("{level} outside [0, 1]")));
            }
        }
        Ok(ids)
    }
}

fn needs_references(a: AttackId) -> bool {
    a.paradigm() == Paradigm::Model || a == AttackId::QueryRef
}

fn needs_shadow(a: AttackId) -> bool {
    a.paradigm() == Paradigm::Learning || a == AttackId::QueryAugment
}

/// Independent seed stream `stream` of `base` (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Metrics of one repeat, keyed by attack name (plus the target-model row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub tables: BTreeMap<String, MetricTable>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub report: Report,
    /// Successful repeats, in repeat order.
    pub repeats: Vec<RepeatResult>,
}

pub fn load_dataset(source: &DatasetSource) -> Result<Option<Dataset>> {
    Ok(match source {
        DatasetSource::Synth(s) => Some(synth_dataset(s)?),
        DatasetSource::Csv { path, schema, max_rows } => {
            let (mut ds, _) = ingest_csv(path, schema)?;
            if let Some(n) = *max_rows {
                ds.ids.truncate(n);
                ds.features.truncate(n);
                ds.labels.truncate(n);
            }
            Some(ds)
        }
        DatasetSource::Seq(_) => None,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let attacks = spec.validate()?;
    let dataset = load_dataset(&spec.dataset)?;
    let outcomes: Vec<(u64, Result<BTreeMap<String, MetricTable>>)> = (0..spec.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(spec.seed, r as u64);
            let tables = match &dataset {
                Some(ds) => run_tabular_repeat(spec, &attacks, ds, seed),
                None => run_seq_repeat(spec, &attacks, seed),
            };
            (seed, tables)
        })
        .collect();

    let mut repeats = Vec::new();
    let mut diagnostics = Vec::new();
    for (r, (seed, res)) in outcomes.into_iter().enumerate() {
        match res {
            Ok(tables) => repeats.push(RepeatResult { repeat: r, seed, tables }),
            Err(e) => diagnostics.push(Diagnostic {
                repeat: r,
                seed,
                message: e.to_string(),
            }),
        }
    }
    if repeats.is_empty() {
        return Err(Error::MissingInput(format!(
            "every repeat failed; first failure: {}",
            diagnostics.first().map_or("", |d| d.message.as_str())
        )));
    }
    let mut row_order: Vec<String> = attacks.iter().map(|a| a.name().to_string()).collect();
    if dataset.is_some() {
        row_order.push(TARGET_MODEL_ROW.to_string());
    }
    let mut rows = Vec::new();
    for name in &row_order {
        let per_seed: Vec<MetricTable> = repeats.iter().map(|r| r.tables[name].clone()).collect();
        for (metric, ms) in aggregate(&per_seed)? {
            rows.push(ReportRow {
                attack: name.clone(),
                metric,
                mean: ms.mean,
                std: ms.std,
                seed_count: per_seed.len(),
            });
        }
    }
    let report = Report {
        rows,
        incomplete: !diagnostics.is_empty(),
        diagnostics,
        notes: notes(&attacks, spec),
    };
    Ok(ExperimentOutcome { report, repeats })
}

/// Mean and sample std over repeats; a single repeat reports std 0.
fn aggregate(per_seed: &[MetricTable]) -> Result<BTreeMap<String, MeanStd>> {
    match per_seed {
        [one] => Ok(one.iter().map(|(k, &v)| (k.clone(), MeanStd { mean: v, std: 0.0 })).collect()),
        _ => aggregate_repeats(per_seed),
    }
}

fn notes(attacks: &[AttackId], spec: &ExperimentSpec) -> Vec<String> {
    let mut notes = vec![
        "threshold: balanced-accuracy optimum on a seeded half of the target scores; confusion metrics on the other half"
            .to_string(),
        "auroc, tpr_at_1fpr and tpr_at_10fpr use every target sample".to_string(),
    ];
    if attacks.contains(&AttackId::SeqZlib) {
        notes.push(format!("compressor: {COMPRESSOR_ID}"));
    }
    let conventions: Vec<&str> = attacks.iter().filter(|a| a.is_convention()).map(|a| a.name()).collect();
    if !conventions.is_empty() {
        notes.push(format!(
            "implementation conventions (no single reference algorithm): {}",
            conventions.join(", ")
        ));
    }
    if attacks.iter().any(|a| a.paradigm() == Paradigm::Query) {
        notes.push(format!(
            "query budget: {} extra queries per sample",
            spec.attack_config.budget
        ));
    }
    notes
}

/// AUROC, TPR at 1% and 10% FPR, and confusion metrics at a threshold
/// chosen on a seeded half of the scores and applied to the other half.
pub fn score_metrics(scores: &ScoreSet, seed: u64) -> Result<MetricTable> {
    let curve = eval::roc_curve(scores)?;
    let mut t = MetricTable::new();
    t.insert("auroc".into(), eval::auroc(&curve));
    t.insert("tpr_at_1fpr".into(), eval::tpr_at_fpr(&curve, 0.01)?);
    t.insert("tpr_at_10fpr".into(), eval::tpr_at_fpr(&curve, 0.10)?);

    let (calibration, held_out) = calibration_halves(scores, seed);
    let threshold = eval::select_threshold(&calibration)?;
    let c = eval::confusion_at_threshold(&held_out, threshold)?;
    t.insert("threshold".into(), threshold);
    t.insert("precision".into(), c.precision);
    t.insert("recall".into(), c.recall);
    t.insert("f1".into(), c.f1);
    t.insert("accuracy".into(), c.accuracy);
    t.insert("fpr".into(), c.fpr);
    t.insert("fnr".into(), c.fnr);
    t.insert("ma".into(), c.ma);
    Ok(t)
}

/// Stratified seeded halves, so both keep members and non-members.
fn calibration_halves(scores: &ScoreSet, seed: u64) -> (ScoreSet, ScoreSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cal: HashSet<&str> = HashSet::new();
    for member in [true, false] {
        let mut ids: Vec<&str> = scores
            .entries
            .iter()
            .filter(|e| e.is_member == member)
            .map(|e| e.sample_id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        cal.extend(&ids[..ids.len().div_ceil(2)]);
    }
    let rest: HashSet<&str> = scores
        .entries
        .iter()
        .map(|e| e.sample_id.as_str())
        .filter(|id| !cal.contains(id))
        .collect();
    (scores.subset(&cal), scores.subset(&rest))
}

/// A trained model and the sample ids it was trained on.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Arc<BuiltinModel>,
    pub trained_on: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct ModelSet {
    pub target: TrainedModel,
    pub shadow: Option<TrainedModel>,
    pub references: Vec<TrainedModel>,
}

/// Train the target on the member half, optionally a shadow on the shadow
/// member half, and one reference per plan partition. Early stopping, when
/// configured, watches the auxiliary non-member half, which no target or
/// reference model trains on.
pub fn train_models(ds: &Dataset, plan: &SplitPlan, spec: &ModelSpec, with_shadow: bool, seed: u64) -> Result<ModelSet> {
    let validation = ds.select(&plan.shadow_nonmember_ids)?;
    let target = train_on(ds, &plan.member_ids, spec, derive_seed(seed, 1), &validation)?;
    let shadow = if with_shadow {
        Some(train_on(ds, &plan.shadow_member_ids, spec, derive_seed(seed, 2), &validation)?)
    } else {
        None
    };
    let references = plan
        .reference_partitions
        .par_iter()
        .enumerate()
        .map(|(k, part)| {
            let ids: Vec<String> = part.iter().cloned().collect();
            train_on(ds, &ids, spec, derive_seed(seed, 100 + k as u64), &validation)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSet { target, shadow, references })
}

/// Prediction logs and manifest: the target and references on the target
/// set, the shadow on the auxiliary set.
pub fn emit_logs(
    ds: &Dataset,
    plan: &SplitPlan,
    models: &ModelSet,
    kind: ModelKind,
    dataset_id: &str,
) -> Result<(Vec<PredictionRecord>, Manifest)> {
    let mut records = predictions("target", &models.target.model, ds, &plan.target_ids)?;
    let mut manifest = Manifest {
        dataset_id: dataset_id.to_string(),
        models: vec![entry("target".into(), ModelRole::Target, kind, &models.target.trained_on)],
    };
    if let Some(s) = &models.shadow {
        records.extend(predictions("shadow", &s.model, ds, &plan.auxiliary_ids)?);
        manifest.models.push(entry("shadow".into(), ModelRole::Shadow, kind, &s.trained_on));
    }
    for (k, r) in models.references.iter().enumerate() {
        let id = format!("ref{k:02}");
        records.extend(predictions(&id, &r.model, ds, &plan.target_ids)?);
        manifest.models.push(entry(id, ModelRole::Reference, kind, &r.trained_on));
    }
    Ok((records, manifest))
}

fn train_on(
    ds: &Dataset,
    ids: &[String],
    spec: &ModelSpec,
    seed: u64,
    validation: &(Vec<Vec<f64>>, Vec<usize>),
) -> Result<TrainedModel> {
    let (x, y) = ds.select(ids)?;
    let cfg = TrainConfig {
        seed,
        ..spec.resolved()?
    };
    let val = cfg.early_stop.map(|_| (validation.0.as_slice(), validation.1.as_slice()));
    let (model, _) = zoo::train_builtin(spec.kind, &x, &y, ds.num_classes, &cfg, val)?;
    Ok(TrainedModel {
        model: Arc::new(model),
        trained_on: ids.iter().cloned().collect(),
    })
}

fn predictions(model_id: &str, model: &BuiltinModel, ds: &Dataset, ids: &[String]) -> Result<Vec<PredictionRecord>> {
    let (x, _) = ds.select(ids)?;
    ids.iter()
        .zip(&x)
        .map(|(id, f)| Ok(PredictionRecord::with_probs(model_id, id, zoo::predict(model, f)?)))
        .collect()
}

fn entry(model_id: String, role: ModelRole, kind: ModelKind, trained_on: &BTreeSet<String>) -> ModelEntry {
    ModelEntry {
        model_id,
        role,
        arch_tag: kind.tag().to_string(),
        trained_on: trained_on.clone(),
    }
}

fn run_tabular_repeat(
    spec: &ExperimentSpec,
    attacks: &[AttackId],
    ds: &Dataset,
    seed: u64,
) -> Result<BTreeMap<String, MetricTable>> {
    let n_refs = if attacks.iter().any(|a| needs_references(*a)) {
        spec.num_reference_models
    } else {
        0
    };
    let plan = plan_splits(&ds.ids, n_refs, derive_seed(seed, 0))?;
    plan.check()?;
    let models = train_models(ds, &plan, &spec.model, attacks.iter().any(|a| needs_shadow(*a)), seed)?;
    let (records, manifest) = emit_logs(ds, &plan, &models, spec.model.kind, &format!("repeat-{seed}"))?;
    let ModelSet { target, shadow, references } = &models;
    let samples = ds.sample_index()?;
    let ctx = RepeatContext {
        spec,
        ds,
        plan: &plan,
        target,
        shadow: shadow.as_ref(),
        references,
        records: &records,
        manifest: &manifest,
        samples: &samples,
        seed,
    };

    let scored = attacks
        .par_iter()
        .map(|&a| ctx.run_attack(a))
        .collect::<Result<Vec<_>>>()?;
    let mut tables = BTreeMap::new();
    for (i, (a, (scores, extra))) in attacks.iter().zip(scored).enumerate() {
        let mut t = score_metrics(&scores, derive_seed(seed, 1000 + i as u64))?;
        t.extend(extra);
        tables.insert(a.name().to_string(), t);
    }

    let (mx, my) = ds.select(&plan.member_ids)?;
    let (nx, ny) = ds.select(&plan.nonmember_ids)?;
    let train_acc = zoo::accuracy(&target.model, &mx, &my)?;
    let test_acc = zoo::accuracy(&target.model, &nx, &ny)?;
    let mut t = MetricTable::new();
    t.insert("train_accuracy".into(), train_acc);
    t.insert("test_accuracy".into(), test_acc);
    t.insert("accuracy_gap".into(), train_acc - test_acc);
    tables.insert(TARGET_MODEL_ROW.to_string(), t);
    Ok(tables)
}

struct RepeatContext<'a> {
    spec: &'a ExperimentSpec,
    ds: &'a Dataset,
    plan: &'a SplitPlan,
    target: &'a TrainedModel,
    shadow: Option<&'a TrainedModel>,
    references: &'a [TrainedModel],
    records: &'a [PredictionRecord],
    manifest: &'a Manifest,
    samples: &'a SampleIndex,
    seed: u64,
}

impl RepeatContext<'_> {
    /// Scores plus any extra per-attack metrics (query accounting).
    fn run_attack(&self, attack: AttackId) -> Result<(ScoreSet, MetricTable)> {
        if attack.paradigm() != Paradigm::Query {
            let s = run_log_attack(attack, self.records, self.manifest, self.samples, &self.spec.attack_config)?;
            return Ok((s, MetricTable::new()));
        }
        let cfg = &self.spec.attack_config;
        let capability = match attack {
            AttackId::QueryAdv | AttackId::QueryTransfer => Capability::LabelOnly,
            _ => Capability::Probs,
        };
        let oracle = ModelOracle::in_process(self.target.model.clone(), capability).with_budget(cfg.query_budget());
        let targets = self.ds.query_samples(&self.plan.target_ids, &self.target.trained_on)?;
        let name = attack.name();
        let stream = derive_seed(self.seed, 500 + attack as u64);
        let scores = match attack {
            AttackId::QueryNeighbor => {
                let spec = crate::attacks::query::NeighborSpec {
                    seed: cfg.neighbor.seed ^ stream,
                    ..cfg.neighbor
                };
                run_query_neighbor(name, &oracle, &targets, &spec)?
            }
            AttackId::QueryAugment => {
                let shadow = self
                    .shadow
                    .ok_or_else(|| Error::MissingInput("Query-augment needs a shadow model".into()))?;
                let shadow_oracle = ModelOracle::in_process(shadow.model.clone(), Capability::Probs)
                    .with_budget(cfg.query_budget());
                let aux = self.ds.query_samples(&self.plan.auxiliary_ids, &shadow.trained_on)?;
                let spec = crate::attacks::query::AugmentSpec {
                    image: cfg.augment.image.or(self.ds.image),
                    seed: cfg.augment.seed ^ stream,
                    ..cfg.augment
                };
                let mlp = crate::attacks::learn::MlpConfig {
                    seed: cfg.mlp.seed ^ stream,
                    ..cfg.mlp.clone()
                };
                run_query_augment(name, (&oracle, &targets), (&shadow_oracle, &aux), &spec, &mlp)?
            }
            AttackId::QueryTransfer => {
                let (aux_x, _) = self.ds.select(&self.plan.auxiliary_ids)?;
                let cfg_s = TrainConfig {
                    seed: cfg.surrogate.seed ^ stream,
                    ..cfg.surrogate.clone()
                };
                run_query_transfer(name, &oracle, &aux_x, &targets, self.ds.num_classes, ModelKind::Mlp, &cfg_s)?
            }
            AttackId::QueryAdv => {
                let spec = crate::attacks::query::BoundarySpec {
                    seed: cfg.boundary.seed ^ stream,
                    ..cfg.boundary
                };
                run_query_adv(name, &oracle, &targets, &spec)?
            }
            AttackId::QueryQrm => {
                let aux: Vec<QuerySample> = self.ds.query_samples(&self.plan.auxiliary_ids, &BTreeSet::new())?;
                let qrm = crate::attacks::query::QrmConfig {
                    seed: cfg.qrm.seed ^ stream,
                    ..cfg.qrm.clone()
                };
                run_query_qrm(name, &oracle, &aux, &targets, &qrm)?
            }
            AttackId::QueryRef => {
                let refs: Vec<ReferenceModel<'_>> = self
                    .references
                    .iter()
                    .map(|r| ReferenceModel {
                        model: &r.model,
                        trained_on: &r.trained_on,
                    })
                    .collect();
                run_query_ref(name, &oracle, &refs, &targets, &cfg.craft, cfg.lira_mode)?
            }
            other => unreachable!("{other} is not a query attack"),
        };
        let stats = oracle.stats();
        let mut extra = MetricTable::new();
        extra.insert("max_extra_queries".into(), stats.max_extra_per_sample as f64);
        Ok((scores, extra))
    }
}

fn run_seq_repeat(spec: &ExperimentSpec, attacks: &[AttackId], seed: u64) -> Result<BTreeMap<String, MetricTable>> {
    let DatasetSource::Seq(fixture) = &spec.dataset else {
        unreachable!("sequence repeat on a tabular dataset");
    };
    let f = seq_fixture(&SeqFixtureSpec {
        seed: derive_seed(seed, 0),
        ..fixture.clone()
    })?;
    let mut tables = BTreeMap::new();
    for (i, &a) in attacks.iter().enumerate() {
        let scores = run_log_attack(a, &f.records, &f.manifest, &f.samples, &spec.attack_config)?;
        tables.insert(a.name().to_string(), score_metrics(&scores, derive_seed(seed, 1000 + i as u64))?);
    }
    Ok(tables)
}
