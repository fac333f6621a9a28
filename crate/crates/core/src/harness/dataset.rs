//! Dataset tables: synthetic Gaussian blobs, CSV ingestion with one-hot and
//! min-max encoding, and a synthetic sequence-log fixture.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::query::{ImageShape, QuerySample};
use crate::error::{Error, Result};
use crate::record::{Manifest, ModelEntry, ModelRole, PredictionRecord, SampleIndex, SampleRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Set when features are a flattened image grid.
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn sample_index(&self) -> Result<SampleIndex> {
        SampleIndex::new(
            self.ids.iter().zip(&self.labels).map(|(id, &y)| SampleRef {
                sample_id: id.clone(),
                label: Some(y),
            }),
            Some(self.num_classes),
        )
    }

    pub fn position_map(&self) -> BTreeMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    /// Features and labels of `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let pos = self.position_map();
        ids.iter()
            .map(|id| {
                let &i = pos.get(id.as_str()).ok_or_else(|| Error::UnknownSample(id.clone()))?;
                Ok((self.features[i].clone(), self.labels[i]))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().unzip())
    }

    pub fn query_samples(&self, ids: &[String], members: &BTreeSet<String>) -> Result<Vec<QuerySample>> {
        let (x, y) = self.select(ids)?;
        Ok(ids
            .iter()
            .zip(x)
            .zip(y)
            .map(|((id, features), label)| QuerySample {
                sample_id: id.clone(),
                features,
                label,
                is_member: members.contains(id),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Scale of the class centers.
    pub class_sep: f64,
    /// Per-feature noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

/// Gaussian blobs: class centers drawn from `N(0, class_sep^2 I)`, points
/// from `N(center, noise^2 I)`, labels assigned round-robin.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    if spec.n == 0 || spec.dim == 0 {
        return Err(Error::config("synthetic data needs n > 0 and dim > 0"));
    }
    if !(spec.class_sep >= 0.0) || !(spec.noise > 0.0) {
        return Err(Error::config("class_sep must be >= 0 and noise > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| spec.class_sep * unit.sample(&mut rng)).collect())
        .collect();
    let mut ds = Dataset {
        ids: Vec::with_capacity(spec.n),
        features: Vec::with_capacity(spec.n),
        labels: Vec::with_capacity(spec.n),
        num_classes: spec.classes,
        image: None,
    };
    for i in 0..spec.n {
        let y = i % spec.classes;
        ds.ids.push(format!("x{i}"));
        ds.features
            .push(centers[y].iter().map(|c| c + spec.noise * unit.sample(&mut rng)).collect());
        ds.labels.push(y);
    }
    Ok(ds)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// Columns one-hot encoded; every other non-label column is numeric.
    pub categorical_columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum ColumnCode {
    Numeric { min: f64, max: f64 },
    Categorical { levels: Vec<String> },
}

/// Fitted column encoding. Categories not seen at fit time map to an
/// all-zero block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    columns: Vec<(String, ColumnCode)>,
}

impl TabularEncoder {
    /// `rows` are the raw cell values of the feature columns, in `names`
    /// order; `first_line` is the file line of `rows[0]` for diagnostics.
    pub fn fit(names: &[String], categorical: &BTreeSet<&str>, rows: &[Vec<String>], first_line: usize) -> Result<Self> {
        let mut columns = Vec::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            if categorical.contains(name.as_str()) {
                let levels: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
                columns.push((
                    name.clone(),
                    ColumnCode::Categorical {
                        levels: levels.into_iter().map(String::from).collect(),
                    },
                ));
            } else {
                let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                for (i, r) in rows.iter().enumerate() {
                    let v = parse_numeric(&r[c], name, first_line + i)?;
                    min = min.min(v);
                    max = max.max(v);
                }
                columns.push((name.clone(), ColumnCode::Numeric { min, max }));
            }
        }
        Ok(Self { columns })
    }

    pub fn dim(&self) -> usize {
        self.columns
            .iter()
            .map(|(_, c)| match c {
                ColumnCode::Numeric { .. } => 1,
                ColumnCode::Categorical { levels } => levels.len(),
            })
            .sum()
    }

    pub fn transform(&self, row: &[String], line: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        for ((name, code), cell) in self.columns.iter().zip(row) {
            match code {
                ColumnCode::Numeric { min, max } => {
                    let v = parse_numeric(cell, name, line)?;
                    out.push(if max > min { (v - min) / (max - min) } else { 0.0 });
                }
                ColumnCode::Categorical { levels } => {
                    let start = out.len();
                    out.resize(start + levels.len(), 0.0);
                    if let Ok(k) = levels.binary_search_by(|l| l.as_str().cmp(cell)) {
                        out[start + k] = 1.0;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn parse_numeric(cell: &str, column: &str, line: usize) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            path: String::new(),
            line,
            message: format!("column `{column}`: `{cell}` is not a number"),
        })
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(if path.extension().is_some_and(|e| e == "gz") {
        Box::new(MultiGzDecoder::new(BufReader::new(f)))
    } else {
        Box::new(BufReader::new(f))
    })
}

/// Read a headed CSV (optionally gzip-compressed): one-hot categoricals,
/// min-max scaled numerics, labels indexed in sorted order of their values.
/// Row order is preserved and sample ids are `row<i>`.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Dataset, TabularEncoder)> {
    let path = path.as_ref();
    let with_path = |e: Error| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open_maybe_gz(path)?);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "empty file".into(),
        });
    }
    let label_idx = headers
        .iter()
        .position(|h| *h == schema.label_column)
        .ok_or_else(|| Error::validation("label_column", format!("no column named `{}`", schema.label_column)))?;
    for c in &schema.categorical_columns {
        if !headers.contains(c) {
            return Err(Error::validation("categorical_columns", format!("no column named `{c}`")));
        }
    }
    let feature_names: Vec<String> = headers.iter().filter(|h| **h != schema.label_column).cloned().collect();

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.position().map_or(line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        raw_labels.push(rec[label_idx].to_string());
        rows.push(
            rec.iter()
                .enumerate()
                .filter(|(c, _)| *c != label_idx)
                .map(|(_, v)| v.to_string())
                .collect::<Vec<_>>(),
        );
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 2,
            message: "no data rows".into(),
        });
    }
    let categorical: BTreeSet<&str> = schema.categorical_columns.iter().map(String::as_str).collect();
    let encoder = TabularEncoder::fit(&feature_names, &categorical, &rows, 2).map_err(with_path)?;
    let features = rows
        .iter()
        .enumerate()
        .map(|(i, r)| encoder.transform(r, i + 2))
        .collect::<Result<Vec<_>>>()
        .map_err(with_path)?;
    let classes: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels(format!("label column has {} distinct value(s)", classes.len())));
    }
    let labels = raw_labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label collected above"))
        .collect();
    Ok((
        Dataset {
            ids: (0..rows.len()).map(|i| format!("row{i}")).collect(),
            features,
            labels,
            num_classes: classes.len(),
            image: None,
        },
        encoder,
    ))
}

/// Synthetic "LLM" logs: per-token log-likelihoods for members and
/// non-members, plus a reference model and optional neighbor records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqFixtureSpec {
    /// Samples per class.
    pub n_per_class: usize,
    pub tokens: usize,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub token_sd: f64,
    /// Standard deviation of a per-sample difficulty offset shared by the
    /// target and the reference model. Zero gives the homogeneous fixture.
    pub difficulty_sd: f64,
    pub neighbors: usize,
    pub seed: u64,
}

impl Default for SeqFixtureSpec {
    fn default() -> Self {
        Self {
            n_per_class: 2000,
            tokens: 32,
            member_mean: -2.0,
            nonmember_mean: -3.0,
            token_sd: 0.5,
            difficulty_sd: 0.0,
            neighbors: 0,
            seed: 0,
        }
    }
}

pub struct SeqFixture {
    pub records: Vec<PredictionRecord>,
    pub manifest: Manifest,
    pub samples: SampleIndex,
}

fn draw_logls(rng: &mut ChaCha8Rng, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let d = Normal::new(mean, sd).expect("valid normal");
    (0..n).map(|_| d.sample(rng).min(0.0)).collect()
}

pub fn seq_fixture(spec: &SeqFixtureSpec) -> Result<SeqFixture> {
    if spec.n_per_class == 0 || spec.tokens == 0 || !(spec.token_sd > 0.0) || !(spec.difficulty_sd >= 0.0) {
        return Err(Error::config("sequence fixture needs positive sizes and token_sd"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut members = BTreeSet::new();
    let mut refs = Vec::new();
    for i in 0..2 * spec.n_per_class {
        let member = i % 2 == 0;
        let id = format!("doc{i}");
        let offset = if spec.difficulty_sd > 0.0 {
            Normal::new(0.0, spec.difficulty_sd).expect("valid normal").sample(&mut rng)
        } else {
            0.0
        };
        let mean = offset + if member { spec.member_mean } else { spec.nonmember_mean };
        let text: Vec<u8> = (0..spec.tokens * 4).map(|_| rng.random_range(b'a'..=b'z')).collect();
        records.push(PredictionRecord::with_token_logls(
            "target",
            &id,
            draw_logls(&mut rng, spec.tokens, mean, spec.token_sd),
            Some(text),
        ));
        // The reference sits at the non-member mean for this sample.
        let ref_mean = (offset + spec.nonmember_mean).min(0.0);
        refs.push(PredictionRecord::with_token_logls("reference", &id, vec![ref_mean; spec.tokens], None));
        for k in 0..spec.neighbors {
            // Neighbors behave like unseen text of the same difficulty.
            let nm = offset + spec.nonmember_mean;
            records.push(PredictionRecord::with_token_logls(
                "target",
                format!("{id}::nbr{k}"),
                draw_logls(&mut rng, spec.tokens, nm, spec.token_sd),
                None,
            ));
        }
        if member {
            members.insert(id);
        }
    }
    records.extend(refs);
    let samples = SampleIndex::new(
        (0..2 * spec.n_per_class).map(|i| SampleRef {
            sample_id: format!("doc{i}"),
            label: None,
        }),
        None,
    )?;
    let manifest = Manifest {
        dataset_id: format!("seq-fixture-{}", spec.seed),
        models: vec![
            ModelEntry {
                model_id: "target".into(),
                role: ModelRole::Target,
                arch_tag: "synthetic-lm".into(),
                trained_on: members,
            },
            ModelEntry {
                model_id: "reference".into(),
                role: ModelRole::Reference,
                arch_tag: "synthetic-lm".into(),
                trained_on: BTreeSet::new(),
            },
        ],
    };
    Ok(SeqFixture {
        records,
        manifest,
        samples,
    })
}
