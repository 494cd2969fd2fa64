//! Scenario configuration, loadable from JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mv::Variant;
use crate::sim::faults::Recipe;
use crate::to_urb::DEFAULT_DELTA;
use crate::types::MAX_PROCESSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Mv,
    Mrt,
    ToUrb,
    Rsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    /// Process index to the step at which it crashes.
    pub crashes: BTreeMap<u32, u64>,
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub reorder: bool,
    pub channel_capacity: usize,
    /// With `drop_prob = 1`, every this-many-th copy on a channel still goes through.
    pub forced_every: u64,
    /// Steps between a crash and its detection.
    pub fd_delay: u64,
    pub transient: Option<TransientSpec>,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            crashes: BTreeMap::new(),
            drop_prob: 0.0,
            dup_prob: 0.0,
            reorder: false,
            channel_capacity: 64,
            forced_every: 4,
            fd_delay: 0,
            transient: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransientSpec {
    pub at_step: u64,
    pub recipe: Recipe,
}

/// Application workload for the total-order and replication scenarios.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    /// Broadcasts issued in total, spread over the correct processes.
    pub messages: usize,
    /// Broadcasts happen at steps drawn from `[0, window)`.
    pub window: u64,
    /// Steps to keep running after everything settled, to observe persistence.
    pub tail: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { messages: 12, window: 6_000, tail: 3_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub variant: Variant,
    pub delta: u64,
    pub faults: FaultConfig,
    /// Hard cap on simulator steps.
    pub budget: u64,
    /// Round cap for the baseline; `None` means `64 * n`.
    pub mrt_rounds: Option<u64>,
    pub scenario: ScenarioKind,
    pub workload: Workload,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 3,
            t: 1,
            seed: 0,
            variant: Variant::Sequential,
            delta: DEFAULT_DELTA,
            faults: FaultConfig::default(),
            budget: 200_000,
            mrt_rounds: None,
            scenario: ScenarioKind::Mv,
            workload: Workload::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n must be at least 3 (got {0})")]
    TooFewProcesses(usize),
    #[error("n must be at most {MAX_PROCESSES} (got {0})")]
    TooManyProcesses(usize),
    #[error("t must satisfy t < n/2 (t={t}, n={n})")]
    BadResilience { t: usize, n: usize },
    #[error("{crashes} crashes scheduled but t={t}")]
    TooManyCrashes { crashes: usize, t: usize },
    #[error("crash scheduled for unknown process {0}")]
    UnknownProcess(u32),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(String),
    #[error("channel capacity must be positive")]
    ZeroCapacity,
    #[error("delta must be positive")]
    ZeroDelta,
}

impl SimConfig {
    pub fn max_faulty(n: usize) -> usize {
        (n - 1) / 2
    }

    pub fn mrt_round_budget(&self) -> u64 {
        self.mrt_rounds.unwrap_or(64 * self.n as u64)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 {
            return Err(ConfigError::TooFewProcesses(self.n));
        }
        if self.n > MAX_PROCESSES {
            return Err(ConfigError::TooManyProcesses(self.n));
        }
        if 2 * self.t >= self.n {
            return Err(ConfigError::BadResilience { t: self.t, n: self.n });
        }
        if self.faults.crashes.len() > self.t {
            return Err(ConfigError::TooManyCrashes { crashes: self.faults.crashes.len(), t: self.t });
        }
        if let Some(p) = self.faults.crashes.keys().find(|p| **p as usize >= self.n) {
            return Err(ConfigError::UnknownProcess(*p));
        }
        for p in [self.faults.drop_prob, self.faults.dup_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::BadProbability(p.to_string()));
            }
        }
        if self.faults.channel_capacity == 0 {
            return Err(ConfigError::ZeroCapacity);
        }
        if self.delta == 0 {
            return Err(ConfigError::ZeroDelta);
        }
        Ok(())
    }
}
