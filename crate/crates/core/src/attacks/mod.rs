//! The attack registry: 21 tabular/image attacks in four paradigms plus the
//! sequence detectors.

pub mod learn;
pub mod logs;
pub mod metric;
pub mod model;
pub mod query;
pub mod seq;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{QueryBudget, DEFAULT_QUERY_BUDGET};
use crate::zoo::TrainConfig;
use learn::{FeatureVariant, MlpConfig};
use metric::MetricVariant;
use model::LiraMode;
use query::{AugmentSpec, BoundarySpec, CraftSpec, NeighborSpec, QrmConfig};
use seq::SeqVariant;

/// Per-attack hyperparameters. Every field has a default, so a spec only
/// names what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Model-robust pairwise ratio threshold.
    pub gamma: f64,
    /// Index (in manifest order) of the reference model Model-robust uses.
    pub robust_reference: usize,
    pub lira_mode: LiraMode,
    /// Seq-mink percentage.
    pub k_percent: f64,
    pub budget: usize,
    pub mlp: MlpConfig,
    pub neighbor: NeighborSpec,
    pub augment: AugmentSpec,
    pub boundary: BoundarySpec,
    pub qrm: QrmConfig,
    pub craft: CraftSpec,
    /// Query-transfer surrogate training (always a small MLP).
    pub surrogate: TrainConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            robust_reference: 0,
            lira_mode: LiraMode::Online,
            k_percent: 20.0,
            budget: DEFAULT_QUERY_BUDGET,
            mlp: MlpConfig::default(),
            neighbor: NeighborSpec::default(),
            augment: AugmentSpec::default(),
            boundary: BoundarySpec::default(),
            qrm: QrmConfig::default(),
            craft: CraftSpec::default(),
            surrogate: TrainConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be positive"));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::config(format!("k_percent {} outside (0, 100]", self.k_percent)));
        }
        if !(self.qrm.alpha > 0.0 && self.qrm.alpha < 1.0) {
            return Err(Error::config(format!("alpha {} outside (0, 1)", self.qrm.alpha)));
        }
        for (what, n) in [("neighbor.count", self.neighbor.count), ("augment.count", self.augment.count)] {
            if n > self.budget {
                return Err(Error::BudgetExceeded { requested: n, budget: self.budget });
            }
            if n == 0 {
                return Err(Error::config(format!("{what} must be positive")));
            }
        }
        self.mlp.validate()
    }

    pub fn query_budget(&self) -> QueryBudget {
        QueryBudget {
            max_extra_queries_per_sample: self.budget,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Paradigm {
    Metric,
    Learning,
    Model,
    Query,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackId {
    MetricLoss,
    MetricConf,
    MetricCorr,
    MetricEnt,
    MetricMent,
    LearnOriginal,
    LearnTop3,
    LearnSorted,
    LearnLabel,
    LearnMerge,
    ModelLoss,
    ModelCalibration,
    ModelLira,
    ModelFpr,
    ModelRobust,
    QueryAugment,
    QueryTransfer,
    QueryAdv,
    QueryNeighbor,
    QueryQrm,
    QueryRef,
    SeqLoss,
    SeqZlib,
    SeqMink,
    SeqReference,
    SeqNeighbor,
}

use AttackId::*;

/// The 21 classification attacks, in table order.
pub const CLASSIFICATION_ATTACKS: [AttackId; 21] = [
    MetricLoss,
    MetricConf,
    MetricCorr,
    MetricEnt,
    MetricMent,
    LearnOriginal,
    LearnTop3,
    LearnSorted,
    LearnLabel,
    LearnMerge,
    ModelLoss,
    ModelCalibration,
    ModelLira,
    ModelFpr,
    ModelRobust,
    QueryAugment,
    QueryTransfer,
    QueryAdv,
    QueryNeighbor,
    QueryQrm,
    QueryRef,
];

pub const SEQUENCE_ATTACKS: [AttackId; 5] = [SeqLoss, SeqZlib, SeqMink, SeqReference, SeqNeighbor];

impl AttackId {
    pub fn all() -> impl Iterator<Item = AttackId> {
        CLASSIFICATION_ATTACKS.into_iter().chain(SEQUENCE_ATTACKS)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricLoss => "Metric-loss",
            MetricConf => "Metric-conf",
            MetricCorr => "Metric-corr",
            MetricEnt => "Metric-ent",
            MetricMent => "Metric-ment",
            LearnOriginal => "Learn-original",
            LearnTop3 => "Learn-top3",
            LearnSorted => "Learn-sorted",
            LearnLabel => "Learn-label",
            LearnMerge => "Learn-merge",
            ModelLoss => "Model-loss",
            ModelCalibration => "Model-calibration",
            ModelLira => "Model-lira",
            ModelFpr => "Model-fpr",
            ModelRobust => "Model-robust",
            QueryAugment => "Query-augment",
            QueryTransfer => "Query-transfer",
            QueryAdv => "Query-adv",
            QueryNeighbor => "Query-neighbor",
            QueryQrm => "Query-qrm",
            QueryRef => "Query-ref",
            SeqLoss => "Seq-loss",
            SeqZlib => "Seq-zlib",
            SeqMink => "Seq-mink",
            SeqReference => "Seq-reference",
            SeqNeighbor => "Seq-neighbor",
        }
    }

    pub fn paradigm(self) -> Paradigm {
        match self {
            MetricLoss | MetricConf | MetricCorr | MetricEnt | MetricMent => Paradigm::Metric,
            LearnOriginal | LearnTop3 | LearnSorted | LearnLabel | LearnMerge => Paradigm::Learning,
            ModelLoss | ModelCalibration | ModelLira | ModelFpr | ModelRobust => Paradigm::Model,
            QueryAugment | QueryTransfer | QueryAdv | QueryNeighbor | QueryQrm | QueryRef => Paradigm::Query,
            SeqLoss | SeqZlib | SeqMink | SeqReference | SeqNeighbor => Paradigm::Sequence,
        }
    }

    pub fn metric_variant(self) -> Option<MetricVariant> {
        Some(match self {
            MetricLoss => MetricVariant::Loss,
            MetricConf => MetricVariant::Conf,
            MetricCorr => MetricVariant::Corr,
            MetricEnt => MetricVariant::Ent,
            MetricMent => MetricVariant::Ment,
            _ => return None,
        })
    }

    pub fn feature_variant(self) -> Option<FeatureVariant> {
        Some(match self {
            LearnOriginal => FeatureVariant::Original,
            LearnTop3 => FeatureVariant::Top3,
            LearnSorted => FeatureVariant::Sorted,
            LearnLabel => FeatureVariant::Label,
            LearnMerge => FeatureVariant::Merge,
            QueryAugment => FeatureVariant::AugmentCorr,
            _ => return None,
        })
    }

    pub fn seq_variant(self) -> Option<SeqVariant> {
        Some(match self {
            SeqLoss => SeqVariant::Loss,
            SeqZlib => SeqVariant::Zlib,
            SeqMink => SeqVariant::Mink,
            SeqReference => SeqVariant::Reference,
            SeqNeighbor => SeqVariant::Neighbor,
            _ => return None,
        })
    }

    /// Attacks whose procedure is a declared convention rather than a
    /// published algorithm; reports flag them.
    pub fn is_convention(self) -> bool {
        matches!(self, QueryAdv | QueryRef)
    }
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Comma-separated list of every registered name, for help and errors.
pub fn registered_names() -> String {
    AttackId::all().map(AttackId::name).collect::<Vec<_>>().join(", ")
}

impl FromStr for AttackId {
    type Err = Error;

    /// Case-insensitive match against the registered names.
    fn from_str(s: &str) -> Result<Self, Error> {
        AttackId::all()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownAttack {
                name: s.to_string(),
                registered: registered_names(),
            })
    }
}
