//! Black-box query access to a target model with per-sample budget
//! accounting.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attacks::metric::argmax;
use crate::error::{Error, Result};
use crate::record::{validate_probs, PredictionRecord};
use crate::zoo::{self, BuiltinModel};

pub const DEFAULT_QUERY_BUDGET: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Probs,
    LabelOnly,
}

/// Extra queries allowed per sample beyond the base query on the sample
/// itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    pub max_extra_queries_per_sample: usize,
}

impl Default for QueryBudget {
    fn default() -> Self {
        Self {
            max_extra_queries_per_sample: DEFAULT_QUERY_BUDGET,
        }
    }
}

pub enum Backend {
    InProcess(Arc<BuiltinModel>),
    /// Recorded outputs keyed by sample id. Only answers the base query.
    LogLookup(HashMap<String, Vec<f64>>),
    Remote(RemoteBackend),
}

pub struct RemoteBackend {
    base_url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct FeaturesBody<'a> {
    features: &'a [f64],
}

#[derive(Deserialize)]
struct ProbsReply {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct LabelReply {
    label: usize,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Oracle(format!("building HTTP client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, route: &str, features: &[f64]) -> Result<T> {
        let url = format!("{}/{route}", self.base_url);
        let resp = self
            .client
            .post(&url)
            .json(&FeaturesBody { features })
            .send()
            .map_err(|e| Error::Oracle(format!("POST {url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::Oracle(format!("POST {url}: HTTP {}", resp.status())));
        }
        resp.json::<T>()
            .map_err(|e| Error::Oracle(format!("POST {url}: bad reply: {e}")))
    }
}

/// Per-oracle query statistics, for auditing the budget law.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueryStats {
    pub sessions: usize,
    pub total_queries: usize,
    pub max_extra_per_sample: usize,
}

pub struct ModelOracle {
    backend: Backend,
    capability: Capability,
    budget: QueryBudget,
    stats: Mutex<QueryStats>,
}

impl ModelOracle {
    pub fn new(backend: Backend, capability: Capability, budget: QueryBudget) -> Self {
        Self {
            backend,
            capability,
            budget,
            stats: Mutex::new(QueryStats::default()),
        }
    }

    pub fn in_process(model: Arc<BuiltinModel>, capability: Capability) -> Self {
        Self::new(Backend::InProcess(model), capability, QueryBudget::default())
    }

    pub fn from_log(records: &[PredictionRecord], model_id: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for r in records.iter().filter(|r| r.model_id == model_id) {
            map.insert(r.sample_id.clone(), r.require_probs()?.to_vec());
        }
        Ok(Self::new(Backend::LogLookup(map), Capability::Probs, QueryBudget::default()))
    }

    pub fn with_budget(mut self, budget: QueryBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn capability(&self) -> Capability {
        self.capability
    }

    pub fn budget(&self) -> QueryBudget {
        self.budget
    }

    pub fn stats(&self) -> QueryStats {
        *self.stats.lock().expect("stats lock poisoned")
    }

    /// Open a query session for one sample. The first query in a session is
    /// the base query; every later one counts against the budget.
    pub fn session<'a>(&'a self, sample_id: &str) -> Session<'a> {
        Session {
            oracle: self,
            sample_id: sample_id.to_string(),
            used: 0,
        }
    }

    fn raw_probs(&self, sample_id: &str, features: &[f64], is_base: bool) -> Result<Vec<f64>> {
        let p = match &self.backend {
            Backend::InProcess(m) => zoo::predict(m, features)?,
            Backend::LogLookup(map) => {
                if !is_base {
                    return Err(Error::Capability(
                        "a log-lookup oracle only answers queries on logged samples".into(),
                    ));
                }
                map.get(sample_id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))?
            }
            Backend::Remote(r) => r.post::<ProbsReply>("predict", features)?.probs,
        };
        validate_probs(&p).map_err(|e| Error::Oracle(format!("oracle returned invalid probabilities: {e}")))?;
        Ok(p)
    }

    fn raw_label(&self, sample_id: &str, features: &[f64], is_base: bool) -> Result<usize> {
        match &self.backend {
            Backend::Remote(r) if self.capability == Capability::LabelOnly => {
                Ok(r.post::<LabelReply>("label", features)?.label)
            }
            _ => Ok(argmax(&self.raw_probs(sample_id, features, is_base)?)),
        }
    }
}

pub struct Session<'a> {
    oracle: &'a ModelOracle,
    sample_id: String,
    used: usize,
}

impl Session<'_> {
    /// Extra queries issued so far (the base query is free).
    pub fn extra_used(&self) -> usize {
        self.used.saturating_sub(1)
    }

    /// Queries still available, counting the base query if unused.
    pub fn remaining(&self) -> usize {
        (self.oracle.budget.max_extra_queries_per_sample + 1).saturating_sub(self.used)
    }

    fn charge(&mut self) -> Result<bool> {
        if self.remaining() == 0 {
            return Err(Error::BudgetExceeded {
                requested: self.used,
                budget: self.oracle.budget.max_extra_queries_per_sample,
            });
        }
        self.used += 1;
        Ok(self.used == 1)
    }

    pub fn probs(&mut self, features: &[f64]) -> Result<Vec<f64>> {
        if self.oracle.capability == Capability::LabelOnly {
            return Err(Error::Capability("oracle is label-only".into()));
        }
        let is_base = self.charge()?;
        self.oracle.raw_probs(&self.sample_id, features, is_base)
    }

    pub fn label(&mut self, features: &[f64]) -> Result<usize> {
        let is_base = self.charge()?;
        self.oracle.raw_label(&self.sample_id, features, is_base)
    }
}

impl Drop for Session<'_> {
    fn drop(&mut self) {
        if let Ok(mut s) = self.oracle.stats.lock() {
            s.sessions += 1;
            s.total_queries += self.used;
            s.max_extra_per_sample = s.max_extra_per_sample.max(self.extra_used());
        }
    }
}
