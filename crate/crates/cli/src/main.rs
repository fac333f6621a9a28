//! `memaudit`: plan splits, build datasets, train models, run attacks and
//! evaluate them from the command line. Stages talk through files.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use memaudit_core::attacks::logs::run_log_attack;
use memaudit_core::attacks::query::{run_query_adv, run_query_neighbor, run_query_qrm, run_query_transfer};
use memaudit_core::attacks::{AttackConfig, AttackId, Paradigm, CLASSIFICATION_ATTACKS, SEQUENCE_ATTACKS};
use memaudit_core::eval;
use memaudit_core::harness::experiment::{derive_seed, score_metrics};
use memaudit_core::harness::report::{emit_all, emit_report, Report, ReportFormat, ReportRow};
use memaudit_core::harness::{
    emit_logs, ingest_csv, plan_splits, run_experiment, synth_dataset, train_models, CsvSchema, Dataset,
    ExperimentSpec, ModelSpec, SplitPlan, SynthSpec,
};
use memaudit_core::oracle::{Capability, ModelOracle};
use memaudit_core::record::{load_prediction_log, write_prediction_log, Manifest, SampleIndex, SampleRef, ScoreSet};
use memaudit_core::zoo::{BuiltinModel, EarlyStop, ModelKind};
use memaudit_core::{Error, Result};
use serde_json::json;

fn attack_list() -> String {
    let line = |ids: &[AttackId]| ids.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ");
    format!(
        "Registered attacks:\n  {}\n\nSequence detectors:\n  {}",
        line(&CLASSIFICATION_ATTACKS),
        line(&SEQUENCE_ATTACKS)
    )
}

#[derive(Parser, Debug)]
#[command(name = "memaudit", version, about = "Membership-inference audit engine", after_help = attack_list())]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a dataset into target/auxiliary halves and reference partitions.
    Plan(PlanArgs),
    /// Generate a Gaussian-blob dataset.
    Synth(SynthArgs),
    /// Encode a CSV file into a dataset.
    Ingest(IngestArgs),
    /// Train target, shadow and reference models and write their logs.
    Train(TrainArgs),
    /// Score samples with one attack.
    #[command(after_help = attack_list())]
    Attack(AttackArgs),
    /// Evaluate a score file.
    Eval(EvalArgs),
    /// Build a report table from score files.
    Report(ReportArgs),
    /// Run a full experiment from a spec file.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 16)]
    num_references: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// CSV file, optionally gzip-compressed (`.gz`).
    #[arg(long)]
    csv: PathBuf,
    /// Label column name.
    #[arg(long)]
    label: String,
    /// Comma-separated categorical column names.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "mlp")]
    kind: ModelKind,
    /// Overfit level in [0, 1]; sets epochs and weight decay.
    #[arg(long)]
    overfit_level: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    early_stop: Option<usize>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Attack name (case-insensitive).
    #[arg(long)]
    name: String,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Dataset with labels (and features, for query attacks).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split plan (query attacks).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Target model file; enables the query attacks that need only the target.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Attack configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Quantile level for Query-qrm.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k_percent: Option<f64>,
    /// Extra queries allowed per sample.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// False-positive rate for the TPR@FPR figure.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Score files (repeatable).
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    repeats: Option<usize>,
    /// Write only this format; by default CSV, JSON and meta.json are written.
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "mlp" => Ok(ModelKind::Mlp),
        "logreg" => Ok(ModelKind::Logreg),
        _ => Err(format!("`{s}` is not mlp or logreg")),
    }
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

struct Ctx {
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io { path: self.out.clone(), source: e })?;
        Ok(self.out.join(name))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    match cli.command {
        Command::Plan(a) => plan(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report(&ctx, a),
        Command::Run(a) => run(cli.seed, cli.out, a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    println!("{}", path.display());
    Ok(())
}

fn plan(ctx: &Ctx, a: PlanArgs) -> Result<()> {
    let ds: Dataset = read_json(&a.dataset)?;
    let p = plan_splits(&ds.ids, a.num_references, ctx.seed())?;
    write_json(&ctx.path("plan.json")?, &p)
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let ds = synth_dataset(&SynthSpec {
        n: a.n,
        dim: a.dim,
        classes: a.classes,
        class_sep: a.class_sep,
        noise: a.noise,
        seed: ctx.seed(),
    })
    .map_err(|e| Error::Validation { field: "synth".into(), message: e.to_string() })?;
    write_json(&ctx.path("dataset.json")?, &ds)
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let schema = CsvSchema {
        label_column: a.label,
        categorical_columns: a.categorical,
    };
    let (ds, _) = ingest_csv(&a.csv, &schema)?;
    eprintln!("{} rows, {} features, {} classes", ds.len(), ds.dim(), ds.num_classes);
    write_json(&ctx.path("dataset.json")?, &ds)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let ds: Dataset = read_json(&a.dataset)?;
    let plan: SplitPlan = read_json(&a.plan)?;
    plan.check()?;
    let mut spec = ModelSpec {
        kind: a.kind,
        overfit_level: a.overfit_level,
        early_stop: a.early_stop.map(|patience| EarlyStop { patience }),
        ..ModelSpec::default()
    };
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    let models = train_models(&ds, &plan, &spec, true, ctx.seed())?;
    let (records, manifest) = emit_logs(&ds, &plan, &models, spec.kind, "cli")?;
    let dir = ctx.path("models")?;
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    for m in &manifest.models {
        let model = match m.model_id.as_str() {
            "target" => &models.target.model,
            "shadow" => &models.shadow.as_ref().expect("shadow trained").model,
            id => &models.references[id.trim_start_matches("ref").parse::<usize>().expect("ref id")].model,
        };
        model.save(dir.join(format!("{}.json", m.model_id)))?;
    }
    let log = ctx.path("log.jsonl")?;
    write_prediction_log(&log, &records)?;
    println!("{}", log.display());
    let mpath = ctx.path("manifest.json")?;
    manifest.save(&mpath)?;
    println!("{}", mpath.display());
    Ok(())
}

/// Sample index from the dataset, or (label-free) from the log's ids.
fn sample_index(dataset: Option<&Dataset>, records: &[memaudit_core::PredictionRecord]) -> Result<SampleIndex> {
    if let Some(ds) = dataset {
        return ds.sample_index();
    }
    let ids: BTreeSet<&str> = records
        .iter()
        .map(|r| r.sample_id.as_str())
        .filter(|id| memaudit_core::attacks::seq::neighbor_parent(id).is_none())
        .collect();
    SampleIndex::new(
        ids.into_iter().map(|id| SampleRef {
            sample_id: id.to_string(),
            label: None,
        }),
        None,
    )
}

fn attack(ctx: &Ctx, a: AttackArgs) -> Result<()> {
    let id: AttackId = a.name.parse()?;
    let mut cfg: AttackConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AttackConfig::default(),
    };
    if let Some(alpha) = a.alpha {
        cfg.qrm.alpha = alpha;
    }
    if let Some(k) = a.k_percent {
        cfg.k_percent = k;
    }
    if let Some(b) = a.budget {
        cfg.budget = b;
    }
    cfg.validate().map_err(|e| Error::Validation { field: "attack".into(), message: e.to_string() })?;
    let manifest = Manifest::load(&a.manifest)?;
    let dataset: Option<Dataset> = a.dataset.as_deref().map(read_json).transpose()?;

    let scores = if id.paradigm() == Paradigm::Query {
        query_attack(ctx, id, &cfg, &manifest, dataset.as_ref(), &a)?
    } else {
        let log = a
            .log
            .as_ref()
            .ok_or_else(|| Error::MissingInput(format!("{id} needs --log")))?;
        let records = load_prediction_log(log)?;
        let samples = sample_index(dataset.as_ref(), &records)?;
        run_log_attack(id, &records, &manifest, &samples, &cfg)?
    };
    let path = ctx.path(&format!("scores-{}.jsonl", id.name()))?;
    scores.write_jsonl(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn query_attack(
    ctx: &Ctx,
    id: AttackId,
    cfg: &AttackConfig,
    manifest: &Manifest,
    dataset: Option<&Dataset>,
    a: &AttackArgs,
) -> Result<ScoreSet> {
    let need = |what: &str| Error::MissingInput(format!("{id} needs --{what}"));
    let (Some(ds), Some(plan_path), Some(model_path)) = (dataset, a.plan.as_ref(), a.model.as_ref()) else {
        return Err(need("dataset, --plan and --model"));
    };
    let plan: SplitPlan = read_json(plan_path)?;
    let model = Arc::new(BuiltinModel::load(model_path)?);
    let members = &manifest.target()?.trained_on;
    let targets = ds.query_samples(&plan.target_ids, members)?;
    let stream = derive_seed(ctx.seed(), id as u64);
    let oracle = |cap| ModelOracle::in_process(model.clone(), cap).with_budget(cfg.query_budget());
    let name = id.name();
    let scores = match id {
        AttackId::QueryNeighbor => {
            let o = oracle(Capability::Probs);
            let spec = memaudit_core::attacks::query::NeighborSpec { seed: stream, ..cfg.neighbor };
            run_query_neighbor(name, &o, &targets, &spec)?
        }
        AttackId::QueryAdv => {
            let o = oracle(Capability::LabelOnly);
            let spec = memaudit_core::attacks::query::BoundarySpec { seed: stream, ..cfg.boundary };
            run_query_adv(name, &o, &targets, &spec)?
        }
        AttackId::QueryQrm => {
            let o = oracle(Capability::Probs);
            let aux = ds.query_samples(&plan.auxiliary_ids, &BTreeSet::new())?;
            let qrm = memaudit_core::attacks::query::QrmConfig { seed: stream, ..cfg.qrm.clone() };
            run_query_qrm(name, &o, &aux, &targets, &qrm)?
        }
        AttackId::QueryTransfer => {
            let o = oracle(Capability::LabelOnly);
            let (aux_x, _) = ds.select(&plan.auxiliary_ids)?;
            let train = memaudit_core::zoo::TrainConfig { seed: stream, ..cfg.surrogate.clone() };
            run_query_transfer(name, &o, &aux_x, &targets, ds.num_classes, ModelKind::Mlp, &train)?
        }
        _ => {
            return Err(Error::Capability(format!(
                "{id} needs shadow or reference models in process; use `memaudit run`"
            )))
        }
    };
    Ok(scores)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::Validation { field: "alpha".into(), message: format!("{} outside (0, 1)", a.alpha) });
    }
    let scores = ScoreSet::read_jsonl(&a.scores)?;
    let curve = eval::roc_curve(&scores)?;
    let threshold = eval::select_threshold(&scores)?;
    let c = eval::confusion_at_threshold(&scores, threshold)?;
    let out = json!({
        "attack": scores.attack_name,
        "n": scores.len(),
        "members": scores.num_members(),
        "auroc": eval::auroc(&curve),
        "alpha": a.alpha,
        "tpr_at_alpha": eval::tpr_at_fpr(&curve, a.alpha)?,
        "threshold": threshold,
        "confusion": c,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.scores {
        let s = ScoreSet::read_jsonl(p)?;
        let table: BTreeMap<String, f64> = score_metrics(&s, ctx.seed())?;
        rows.extend(table.into_iter().map(|(metric, mean)| ReportRow {
            attack: s.attack_name.clone(),
            metric,
            mean,
            std: 0.0,
            seed_count: 1,
        }));
    }
    let r = Report {
        rows,
        incomplete: false,
        diagnostics: vec![],
        notes: vec![],
    };
    let path = ctx.path(&format!("report.{}", a.format.extension()))?;
    emit_report(&r, a.format, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(seed: Option<u64>, out: Option<PathBuf>, a: RunArgs) -> Result<()> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(r) = a.repeats {
        spec.repeats = r;
    }
    let dir = out.or_else(|| spec.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    let outcome = run_experiment(&spec)?;
    let report = &outcome.report;
    match a.format {
        Some(f) => {
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            emit_report(report, f, dir.join(format!("report.{}", f.extension())))?;
        }
        None => emit_all(report, &dir)?,
    }
    for d in &report.diagnostics {
        eprintln!("repeat {} (seed {}) failed: {}", d.repeat, d.seed, d.message);
    }
    print!("{}", report.to_text());
    Ok(())
}
