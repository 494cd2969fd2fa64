//! Machine-readable run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::invariants::Verdict;
use crate::sim::config::SimConfig;
use crate::sim::world::Metrics;

pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub config: SimConfig,
    pub metrics: Metrics,
    pub verdicts: Vec<Verdict>,
    pub trace_hash: String,
    /// Scenario-specific measurements.
    pub stats: BTreeMap<String, serde_json::Value>,
}

impl RunReport {
    pub fn new(config: SimConfig, metrics: Metrics, trace_hash: String) -> Self {
        RunReport { schema: SCHEMA, config, metrics, verdicts: Vec::new(), trace_hash, stats: BTreeMap::new() }
    }

    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.pass)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn stat(&mut self, key: &str, v: impl Serialize) {
        self.stats.insert(key.to_owned(), serde_json::to_value(v).expect("stats serialize"));
    }

    pub fn stat_u64(&self, key: &str) -> Option<u64> {
        self.stats.get(key).and_then(serde_json::Value::as_u64)
    }
}
