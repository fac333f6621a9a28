//! Reference-model attacks.
//!
//! Each scored sample gets the detection metric of every reference model,
//! split by whether that reference trained on the sample (`in_values`) or
//! not (`out_values`). The attacks compare the target model's metric with
//! those two populations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::metric::{require_label, xent_loss};
use crate::error::{Error, Result};
use crate::record::{clamp_prob, Manifest, ModelRole, PredictionRecord, SampleIndex, PROB_EPS};

/// Lower bound on fitted standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Loss,
    ScaledLogit,
    Confidence,
}

impl MetricKind {
    /// Evaluate this metric on one prediction.
    pub fn evaluate(self, probs: &[f64], label: usize) -> Result<f64> {
        let y = require_label(Some(label), probs, "reference metric")?;
        Ok(match self {
            MetricKind::Loss => xent_loss(probs, y),
            MetricKind::ScaledLogit => scaled_logit(probs, y)?,
            MetricKind::Confidence => clamp_prob(probs[y]),
        })
    }
}

/// `ln(p_y / (1 - p_y))`, with the complement summed from the other classes
/// so it keeps precision when `p_y` is close to one.
pub fn scaled_logit(probs: &[f64], label: usize) -> Result<f64> {
    let y = require_label(Some(label), probs, "scaled logit")?;
    let p = clamp_prob(probs[y]);
    let rest: f64 = if probs.len() == 1 {
        1.0 - probs[0]
    } else {
        probs.iter().enumerate().filter(|(i, _)| *i != y).map(|(_, v)| v).sum()
    };
    Ok(p.ln() - clamp_prob(rest).ln())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub in_values: Vec<f64>,
    pub out_values: Vec<f64>,
}

impl BankEntry {
    pub fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.in_values.iter().chain(&self.out_values).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBank {
    pub metric_kind: MetricKind,
    pub entries: BTreeMap<String, BankEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankLine {
    sample_id: String,
    metric_kind: MetricKind,
    in_values: Vec<f64>,
    out_values: Vec<f64>,
}

impl ReferenceBank {
    pub fn entry(&self, sample_id: &str) -> Result<&BankEntry> {
        self.entries
            .get(sample_id)
            .ok_or_else(|| Error::MissingInput(format!("no reference values for sample `{sample_id}`")))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for (id, e) in &self.entries {
            let line = BankLine {
                sample_id: id.clone(),
                metric_kind: self.metric_kind,
                in_values: e.in_values.clone(),
                out_values: e.out_values.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut kind = None;
        let mut entries = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: BankLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if *kind.get_or_insert(l.metric_kind) != l.metric_kind {
                return Err(Error::validation("metric_kind", format!("line {}: mixed metric kinds", i + 1)));
            }
            entries.insert(l.sample_id, BankEntry { in_values: l.in_values, out_values: l.out_values });
        }
        Ok(Self {
            metric_kind: kind.unwrap_or(MetricKind::Loss),
            entries,
        })
    }
}

/// Partition each reference model's metric values by membership.
pub fn build_reference_bank(
    manifest: &Manifest,
    records: &[PredictionRecord],
    metric_kind: MetricKind,
    samples: &SampleIndex,
) -> Result<ReferenceBank> {
    let refs: BTreeMap<&str, _> = manifest
        .with_role(ModelRole::Reference)
        .map(|m| (m.model_id.as_str(), m))
        .collect();
    if refs.is_empty() {
        return Err(Error::MissingInput("manifest lists no reference models".into()));
    }
    let mut entries: BTreeMap<String, BankEntry> = BTreeMap::new();
    for r in records {
        let Some(model) = refs.get(r.model_id.as_str()) else {
            continue;
        };
        let sample = samples
            .get(&r.sample_id)
            .ok_or_else(|| Error::UnknownSample(r.sample_id.clone()))?;
        let label = sample
            .label
            .ok_or_else(|| Error::MissingInput(format!("sample `{}` has no label", r.sample_id)))?;
        let v = metric_kind.evaluate(r.require_probs()?, label)?;
        let e = entries.entry(r.sample_id.clone()).or_default();
        if model.trained_on.contains(&r.sample_id) {
            e.in_values.push(v);
        } else {
            e.out_values.push(v);
        }
    }
    Ok(ReferenceBank { metric_kind, entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianFit {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Sample mean and (n - 1) standard deviation, floored at [`SIGMA_FLOOR`].
pub fn fit_gaussian(samples: &[f64]) -> Result<GaussianFit> {
    if samples.is_empty() {
        return Err(Error::MissingInput("cannot fit a Gaussian to no samples".into()));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let sigma = if samples.len() < 2 {
        SIGMA_FLOOR
    } else {
        (samples.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(GaussianFit {
        mu,
        sigma: sigma.max(SIGMA_FLOOR),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean reference loss minus target loss.
pub fn score_model_loss(target_loss: f64, entry: &BankEntry) -> Result<f64> {
    let m = mean(entry.all_values()).ok_or_else(|| Error::MissingInput("empty reference bank entry".into()))?;
    Ok(m - target_loss)
}

/// Mean OUT-reference loss minus target loss.
pub fn score_calibration(target_loss: f64, out_values: &[f64]) -> Result<f64> {
    let m = mean(out_values.iter().copied())
        .ok_or_else(|| Error::MissingInput("calibration needs at least one out-reference value".into()))?;
    Ok(m - target_loss)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiraMode {
    #[default]
    Online,
    Offline,
}

/// Likelihood-ratio score on scaled logits.
///
/// Online: `log N(phi; in) - log N(phi; out)`. Offline: the standardized
/// distance of `phi` above the OUT mean.
pub fn score_lira(phi_target: f64, entry: &BankEntry, mode: LiraMode) -> Result<f64> {
    if entry.out_values.is_empty() {
        return Err(Error::MissingInput("LiRA needs out-reference values".into()));
    }
    let out = fit_gaussian(&entry.out_values)?;
    match mode {
        LiraMode::Online => {
            if entry.in_values.is_empty() {
                return Err(Error::MissingInput("online LiRA needs in-reference values".into()));
            }
            let inn = fit_gaussian(&entry.in_values)?;
            Ok(inn.log_pdf(phi_target) - out.log_pdf(phi_target))
        }
        LiraMode::Offline => Ok((phi_target - out.mu) / out.sigma),
    }
}

/// Bank-wide statistics that stand in for a sample whose IN or OUT side has
/// fewer than two values (with `N` references a sample is all-IN or all-OUT
/// with probability `2^(1-N)`).
#[derive(Clone, Debug, PartialEq)]
pub struct PooledBank {
    /// Mean of `mu_in - mu_out` over samples with both sides present.
    pub shift: f64,
    /// Pooled within-sample standard deviations.
    pub sigma_in: f64,
    pub sigma_out: f64,
    /// Every OUT value in the bank.
    pub all_out: Vec<f64>,
}

fn pooled_sigma<'a>(sides: impl Iterator<Item = &'a [f64]>) -> f64 {
    let (mut ss, mut dof) = (0.0, 0usize);
    for v in sides.filter(|v| v.len() >= 2) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        ss += v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        dof += v.len() - 1;
    }
    if dof == 0 {
        SIGMA_FLOOR
    } else {
        (ss / dof as f64).sqrt().max(SIGMA_FLOOR)
    }
}

impl PooledBank {
    pub fn from_bank(bank: &ReferenceBank) -> Self {
        Self::from_entries(&bank.entries.values().collect::<Vec<_>>())
    }

    pub fn from_entries(entries: &[&BankEntry]) -> Self {
        let entries = || entries.iter().copied();
        let diffs: Vec<f64> = entries()
            .filter_map(|e| Some(mean(e.in_values.iter().copied())? - mean(e.out_values.iter().copied())?))
            .collect();
        Self {
            shift: mean(diffs.iter().copied()).unwrap_or(0.0),
            sigma_in: pooled_sigma(entries().map(|e| e.in_values.as_slice())),
            sigma_out: pooled_sigma(entries().map(|e| e.out_values.as_slice())),
            all_out: entries().flat_map(|e| e.out_values.iter().copied()).collect(),
        }
    }

    fn side(&self, values: &[f64], other: &[f64], sigma: f64, shift: f64) -> Option<GaussianFit> {
        match values.len() {
            0 => mean(other.iter().copied()).map(|m| GaussianFit { mu: m + shift, sigma }),
            1 => Some(GaussianFit { mu: values[0], sigma }),
            _ => fit_gaussian(values).ok(),
        }
    }

    /// [`score_lira`] with sparse sides filled from the pooled statistics.
    pub fn score_lira(&self, phi_target: f64, entry: &BankEntry, mode: LiraMode) -> Result<f64> {
        let missing = || Error::MissingInput("LiRA needs at least one reference value".into());
        let out = self
            .side(&entry.out_values, &entry.in_values, self.sigma_out, -self.shift)
            .ok_or_else(missing)?;
        match mode {
            LiraMode::Online => {
                let inn = self
                    .side(&entry.in_values, &entry.out_values, self.sigma_in, self.shift)
                    .ok_or_else(missing)?;
                Ok(inn.log_pdf(phi_target) - out.log_pdf(phi_target))
            }
            LiraMode::Offline => Ok((phi_target - out.mu) / out.sigma),
        }
    }

    /// OUT values of `entry`, or every OUT value in the bank if it has none.
    pub fn out_values<'a>(&'a self, entry: &'a BankEntry) -> &'a [f64] {
        if entry.out_values.is_empty() {
            &self.all_out
        } else {
            &entry.out_values
        }
    }
}

/// Fraction of OUT values strictly below `phi`, plus half the ties.
pub fn score_fpr_calibrated(phi_target: f64, out_values: &[f64]) -> Result<f64> {
    if out_values.is_empty() {
        return Err(Error::MissingInput("rank score needs out-reference values".into()));
    }
    let below = out_values.iter().filter(|v| **v < phi_target).count() as f64;
    let ties = out_values.iter().filter(|v| **v == phi_target).count() as f64;
    Ok((below + 0.5 * ties) / out_values.len() as f64)
}

/// Single-reference pairwise likelihood-ratio test: the fraction of
/// population points `z` whose target/reference confidence ratio is beaten
/// by the sample's by a factor of at least `gamma`.
pub fn score_rmia(conf_target_x: f64, conf_ref_x: f64, population: &[(f64, f64)], gamma: f64) -> Result<f64> {
    if population.is_empty() {
        return Err(Error::MissingInput("RMIA needs a non-empty population".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::config(format!("gamma must be positive, got {gamma}")));
    }
    let c = |v: f64| v.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let ratio_x = c(conf_target_x) / c(conf_ref_x);
    let hits = population
        .iter()
        .filter(|(t, r)| ratio_x / (c(*t) / c(*r)) >= gamma)
        .count();
    Ok(hits as f64 / population.len() as f64)
}

/// [`score_rmia`] for every sample, each using all the other samples as its
/// population. `pairs[i]` is (target confidence, reference confidence).
pub fn score_rmia_all(pairs: &[(f64, f64)], gamma: f64) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::MissingInput("RMIA needs at least two samples".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::config(format!("gamma must be positive, got {gamma}")));
    }
    let c = |v: f64| v.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let ratios: Vec<f64> = pairs.iter().map(|(t, r)| c(*t) / c(*r)).collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let n_pop = (pairs.len() - 1) as f64;
    Ok(ratios
        .iter()
        .map(|&rx| {
            // rx / rz is non-increasing in rz, so the hits form a prefix.
            let hits = sorted.partition_point(|&rz| rx / rz >= gamma);
            // A sample always passes its own comparison iff 1 >= gamma.
            let own = usize::from(1.0 >= gamma);
            (hits - own) as f64 / n_pop
        })
        .collect())
}
