//! Membership-inference audit engine: prediction-log handling, 21 attacks in
//! four paradigms plus sequence detectors, evaluation metrics, a small model
//! zoo and an experiment harness.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod record;
pub mod zoo;

pub use attacks::{AttackId, Paradigm};
pub use error::{Error, Result};
pub use eval::{ConfusionMetrics, MeanStd, MetricTable, RocCurve};
pub use harness::{Dataset, ExperimentSpec, Report, ReportRow, SplitPlan};
pub use record::{
    LabeledRecord, Manifest, ModelEntry, ModelRole, PredictionRecord, SampleIndex, SampleRef, ScoreEntry, ScoreSet,
};
