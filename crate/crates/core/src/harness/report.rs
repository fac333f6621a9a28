//! Aggregated report tables and their CSV/JSON emission.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row name for the target model's own accuracy figures.
pub const TARGET_MODEL_ROW: &str = "target-model";

pub const COLUMNS: [&str; 5] = ["attack", "metric", "mean", "std", "seed_count"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seed_count: usize,
}

/// A repeat that failed and was left out of the aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub repeat: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub incomplete: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub notes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::validation("format", format!("`{s}` is not csv or json"))),
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    incomplete: bool,
    diagnostics: &'a [Diagnostic],
    notes: &'a [String],
}

impl Report {
    pub fn row(&self, attack: &str, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.attack == attack && r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::config(format!("csv encoding: {e}"));
        w.write_record(COLUMNS).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.attack.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.seed_count.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.rows)?;
        s.push('\n');
        Ok(s)
    }

    pub fn meta_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&Meta {
            incomplete: self.incomplete,
            diagnostics: &self.diagnostics,
            notes: &self.notes,
        })?;
        s.push('\n');
        Ok(s)
    }

    /// Human-readable summary for terminals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{:<18} {:<18} {:>9.4} +- {:.4}  (n={})", r.attack, r.metric, r.mean, r.std, r.seed_count);
        }
        if self.incomplete {
            let _ = writeln!(s, "INCOMPLETE: {} repeat(s) failed", self.diagnostics.len());
        }
        s
    }
}

/// Write the report table to `path` in `format`. Output depends only on the
/// report, so re-emitting gives byte-identical files.
pub fn emit_report(report: &Report, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::MissingInput("report has no rows".into()));
    }
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Json => report.to_json()?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `report.csv`, `report.json` and `meta.json` under `dir`.
pub fn emit_all(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in [ReportFormat::Csv, ReportFormat::Json] {
        emit_report(report, f, dir.join(format!("report.{}", f.extension())))?;
    }
    let meta = dir.join("meta.json");
    std::fs::write(&meta, report.meta_json()?).map_err(|e| Error::io(&meta, e))
}

/// Parse a CSV report back into rows.
pub fn read_csv_rows(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: "<report>".into(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
