//! Experiment orchestration: splits, datasets, end-to-end runs and reports.

pub mod dataset;
pub mod experiment;
pub mod report;
pub mod split;

pub use dataset::{ingest_csv, seq_fixture, synth_dataset, CsvSchema, Dataset, SeqFixtureSpec, SynthSpec};
pub use experiment::{
    emit_logs, run_experiment, train_models, DatasetSource, ExperimentOutcome, ExperimentSpec, ModelSet, ModelSpec,
    RepeatResult, TrainedModel,
};
pub use report::{emit_all, emit_report, Report, ReportFormat, ReportRow};
pub use split::{plan_splits, SplitPlan};
