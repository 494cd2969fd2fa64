//! The classic crash-tolerant reduction: one URB broadcast, then an
//! unbounded sequence of binary consensus rounds. Not self-stabilizing; kept
//! as a differential baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bc::BcObject;
use crate::mv::MvEnv;
use crate::types::{ProcessId, Value};

/// Where the resumable `propose` coroutine currently stands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrtPc {
    Idle,
    /// About to URB-broadcast the proposal.
    Broadcast,
    /// Inside the round loop.
    Rounds,
    Returned(Value),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrtState {
    pub n: usize,
    pub tag: u64,
    pub v: Option<Value>,
    pub proposals: Vec<Option<Value>>,
    pub k: u64,
    pub bc: BTreeMap<u64, BcObject>,
    pub pc: MrtPc,
}

impl MrtState {
    pub fn new(n: usize, tag: u64) -> Self {
        MrtState {
            n,
            tag,
            v: None,
            proposals: vec![None; n],
            k: 0,
            bc: BTreeMap::new(),
            pc: MrtPc::Idle,
        }
    }

    pub fn propose(&mut self, v: Value) {
        if self.pc == MrtPc::Idle {
            self.v = Some(v);
            self.proposals = vec![None; self.n];
            self.bc.clear();
            self.k = 0;
            self.pc = MrtPc::Broadcast;
        }
    }

    pub fn returned(&self) -> Option<&Value> {
        match &self.pc {
            MrtPc::Returned(v) => Some(v),
            _ => None,
        }
    }

    fn slot(&self, k: u64) -> usize {
        (k % self.n as u64) as usize
    }

    /// Advance the coroutine by at most one round.
    pub fn step(&mut self, env: &mut impl MvEnv) {
        match self.pc {
            MrtPc::Idle | MrtPc::Returned(_) => {}
            MrtPc::Broadcast => {
                if let Some(v) = self.v.clone() {
                    env.urb_broadcast(self.tag, v, false);
                }
                self.pc = MrtPc::Rounds;
            }
            MrtPc::Rounds => {
                let k = self.k;
                let j = self.slot(k);
                match self.bc.get(&k).copied().unwrap_or_default() {
                    BcObject::Inactive => {
                        let b = self.proposals[j].is_some();
                        self.bc.insert(k, BcObject::Active { my_proposal: b, decided: None });
                        env.bin_propose(self.tag, &[(k as usize, b)]);
                    }
                    BcObject::Active { decided: None, .. } => {}
                    BcObject::Active { decided: Some(false), .. } => self.k += 1,
                    BcObject::Active { decided: Some(true), .. } => {
                        // wait(proposals[k mod n] != ⊥)
                        if let Some(x) = self.proposals[j].clone() {
                            self.pc = MrtPc::Returned(x);
                        }
                    }
                }
            }
        }
    }

    pub fn on_proposal(&mut self, from: ProcessId, v: Option<Value>) {
        if let Some(slot) = self.proposals.get_mut(from.index()) {
            *slot = v;
        }
    }

    pub fn on_bc_decide(&mut self, tag: u64, index: u64, value: bool) {
        if tag != self.tag {
            return;
        }
        if let Some(BcObject::Active { decided: d @ None, .. }) = self.bc.get_mut(&index) {
            *d = Some(value);
        }
    }
}
