//! Token-likelihood detectors for sequence models.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::PredictionRecord;

/// Identifies the compressor behind Zlib scores in reports.
pub const COMPRESSOR_ID: &str = "flate2/zlib level 6";

/// Sample-id suffix marking a neighbor sequence of another sample.
pub const NEIGHBOR_SEPARATOR: &str = "::nbr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqVariant {
    Loss,
    Zlib,
    Mink,
    Reference,
    Neighbor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub sample_id: String,
    pub token_logls: Vec<f64>,
    pub raw_bytes: Vec<u8>,
    pub ref_token_logls: Option<Vec<f64>>,
}

impl SequenceRecord {
    pub fn from_prediction(record: &PredictionRecord) -> Result<Self> {
        let token_logls = record.token_logls.clone().ok_or_else(|| {
            Error::MissingInput(format!("record for `{}` has no token_logls", record.sample_id))
        })?;
        if token_logls.is_empty() {
            return Err(Error::validation("token_logls", "empty token list"));
        }
        Ok(Self {
            sample_id: record.sample_id.clone(),
            token_logls,
            raw_bytes: record.raw_bytes.clone().unwrap_or_default(),
            ref_token_logls: None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqParams<'a> {
    pub k_percent: Option<f64>,
    /// Mean token losses (negative mean log-likelihoods) of the neighbors.
    pub neighbor_losses: Option<&'a [f64]>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of the lowest `max(1, floor(k% * T))` token log-likelihoods.
pub fn min_k_mean(token_logls: &[f64], k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::config(format!("k_percent {k_percent} outside (0, 100]")));
    }
    if token_logls.is_empty() {
        return Err(Error::validation("token_logls", "empty token list"));
    }
    let t = token_logls.len();
    let count = if k_percent == 100.0 {
        t
    } else {
        ((k_percent / 100.0 * t as f64).floor() as usize).clamp(1, t)
    };
    if count == t {
        // Same summation order as the loss variant, so k = 100 matches it bit for bit.
        return Ok(mean(token_logls));
    }
    let mut sorted = token_logls.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(mean(&sorted[..count]))
}

/// DEFLATE (zlib container) size of `bytes` at the default level.
pub fn compressed_size(bytes: &[u8]) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("finishing into a Vec cannot fail").len()
}

/// Mean NLL divided by compressed size, negated so higher means member.
pub fn zlib_score(mean_nll: f64, compressed_len: usize) -> f64 {
    -(mean_nll / compressed_len as f64)
}

/// Member-oriented score for one sequence.
pub fn seq_score(variant: SeqVariant, record: &SequenceRecord, params: &SeqParams<'_>) -> Result<f64> {
    if record.token_logls.is_empty() {
        return Err(Error::validation("token_logls", "empty token list"));
    }
    let mean_logl = mean(&record.token_logls);
    match variant {
        SeqVariant::Loss => Ok(mean_logl),
        SeqVariant::Mink => {
            let k = params
                .k_percent
                .ok_or_else(|| Error::MissingInput("mink requires k_percent".into()))?;
            min_k_mean(&record.token_logls, k)
        }
        SeqVariant::Zlib => {
            if record.raw_bytes.is_empty() {
                return Err(Error::MissingInput(format!(
                    "zlib requires raw bytes for `{}`",
                    record.sample_id
                )));
            }
            Ok(zlib_score(-mean_logl, compressed_size(&record.raw_bytes)))
        }
        SeqVariant::Reference => {
            let r = record.ref_token_logls.as_deref().ok_or_else(|| {
                Error::MissingInput(format!("reference requires ref_token_logls for `{}`", record.sample_id))
            })?;
            if r.is_empty() {
                return Err(Error::validation("ref_token_logls", "empty token list"));
            }
            Ok(mean_logl - mean(r))
        }
        SeqVariant::Neighbor => {
            let n = params
                .neighbor_losses
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::MissingInput(format!("no neighbors for `{}`", record.sample_id)))?;
            Ok(mean(n) - (-mean_logl))
        }
    }
}

/// Split `"<id>::nbr<k>"` into the id of the sample it neighbors.
pub fn neighbor_parent(sample_id: &str) -> Option<&str> {
    sample_id.split_once(NEIGHBOR_SEPARATOR).map(|(p, _)| p)
}
