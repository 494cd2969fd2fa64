//! Binary consensus objects and an ideal binary consensus service.
//!
//! Each process holds a corruptible cache of [`BcObject`]s. Decisions are
//! fixed by [`IdealBc`], a ledger owned by the simulator: the first proposal
//! it processes for a key wins. The ledger is outside the reach of transient
//! faults and models the self-stabilizing service the algorithms build on.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::ProcessId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcObject {
    #[default]
    Inactive,
    Active { my_proposal: bool, decided: Option<bool> },
}

impl BcObject {
    pub fn is_inactive(&self) -> bool {
        matches!(self, BcObject::Inactive)
    }

    /// `None` while inactive or undecided.
    pub fn result(&self) -> Option<bool> {
        match self {
            BcObject::Inactive => None,
            BcObject::Active { decided, .. } => *decided,
        }
    }
}

/// Identifies one binary object: the owning consensus instance and its index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BcKey {
    pub tag: u64,
    pub index: u64,
}

/// Service-side decision ledger.
#[derive(Clone, Debug, Default)]
pub struct IdealBc {
    decisions: BTreeMap<BcKey, bool>,
    inflight: BTreeSet<(ProcessId, BcKey)>,
    proposals: BTreeMap<BcKey, (bool, bool)>,
}

impl IdealBc {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record that `p` submitted a proposal that the service has not yet processed.
    pub fn submit(&mut self, p: ProcessId, key: BcKey) {
        self.inflight.insert((p, key));
    }

    pub fn is_inflight(&self, p: ProcessId, key: BcKey) -> bool {
        self.inflight.contains(&(p, key))
    }

    /// Process a dequeued proposal and return the decision to report back.
    pub fn process(&mut self, key: BcKey, proposal: bool) -> bool {
        let seen = self.proposals.entry(key).or_insert((false, false));
        if proposal {
            seen.0 = true;
        } else {
            seen.1 = true;
        }
        *self.decisions.entry(key).or_insert(proposal)
    }

    /// The decision reached `p`; it may submit again if its cache still lacks one.
    pub fn complete(&mut self, p: ProcessId, key: BcKey) {
        self.inflight.remove(&(p, key));
    }

    pub fn decision(&self, key: BcKey) -> Option<bool> {
        self.decisions.get(&key).copied()
    }

    /// Whether `b` was proposed by anyone for `key` (validity witness).
    pub fn was_proposed(&self, key: BcKey, b: bool) -> bool {
        self.proposals.get(&key).is_some_and(|&(t, f)| if b { t } else { f })
    }

    pub fn decided_keys(&self) -> usize {
        self.decisions.len()
    }
}
