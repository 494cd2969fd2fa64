//! Replicated state machine on top of the total-order layer. The agreed
//! value carries the proposer's automaton state next to the readiness
//! vector; every replica adopts that state before applying the batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::node::{NodeEvent, StepCtx};
use crate::to_urb::{Delivered, Sink};
use crate::types::{ProcessId, ReadyVector, Value};

/// Deterministic application automaton with wholesale state transfer.
pub trait Automaton {
    fn get_state(&self) -> Vec<u8>;
    /// Replace the state; `false` leaves it untouched when `s` does not decode.
    fn set_state(&mut self, s: &[u8]) -> bool;
    fn apply(&mut self, origin: ProcessId, cmd: &Value);
}

/// Keyed counters. Commands are `key+delta` (e.g. `k3+7`); anything else
/// is applied as a no-op that still advances the history digest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvAutomaton {
    pub counters: BTreeMap<String, i64>,
    pub applied: u64,
    pub digest: String,
}

impl KvAutomaton {
    pub fn parse(cmd: &[u8]) -> Option<(&str, i64)> {
        let s = std::str::from_utf8(cmd).ok()?;
        let (k, d) = s.split_once('+')?;
        Some((k, d.parse().ok()?))
    }
}

impl Automaton for KvAutomaton {
    fn get_state(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plain data serializes")
    }

    fn set_state(&mut self, s: &[u8]) -> bool {
        match serde_json::from_slice(s) {
            Ok(st) => {
                *self = st;
                true
            }
            Err(_) => false,
        }
    }

    fn apply(&mut self, origin: ProcessId, cmd: &Value) {
        if let Some((k, d)) = Self::parse(cmd.as_bytes()) {
            let c = self.counters.entry(k.to_owned()).or_insert(0);
            *c = c.wrapping_add(d);
        }
        self.applied += 1;
        let mut h = Sha256::new();
        h.update(self.digest.as_bytes());
        h.update(origin.0.to_be_bytes());
        h.update(cmd.as_bytes());
        self.digest = hex::encode(h.finalize());
    }
}

pub fn encode_slot(state: &[u8], ready: &ReadyVector) -> Value {
    let mut out = Vec::with_capacity(4 + state.len() + ready.len() * 8);
    out.extend_from_slice(&(state.len() as u32).to_be_bytes());
    out.extend_from_slice(state);
    out.extend_from_slice(&ready.encode());
    Value::new(out).expect("length prefix makes it non-empty")
}

pub fn decode_slot(v: &Value) -> Option<(&[u8], ReadyVector)> {
    let b = v.as_bytes();
    let len = u32::from_be_bytes(b.get(..4)?.try_into().ok()?) as usize;
    let state = b.get(4..4 + len)?;
    let ready = ReadyVector::decode(b.get(4 + len..)?)?;
    Some((state, ready))
}

/// [`Sink`] that drives an automaton.
#[derive(Clone, Debug, Default)]
pub struct Replica<A> {
    pub automaton: A,
    /// Commands applied, in order (for determinism checks).
    pub applied: Vec<Delivered>,
}

impl<A: Automaton> Replica<A> {
    pub fn new(automaton: A) -> Self {
        Replica { automaton, applied: Vec::new() }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.automaton.get_state()
    }
}

pub fn state_hash(s: &[u8]) -> String {
    hex::encode(Sha256::digest(s))
}

impl<A: Automaton> Sink for Replica<A> {
    fn proposal(&self, all_ready: &ReadyVector) -> Value {
        encode_slot(&self.automaton.get_state(), all_ready)
    }

    fn ready_vector(&self, decided: &Value) -> Option<ReadyVector> {
        decode_slot(decided).map(|(_, r)| r)
    }

    fn deliver(&mut self, tag: u64, decided: &Value, batch: Vec<(ProcessId, u64, Value)>, ctx: &mut StepCtx) {
        if let Some((state, _)) = decode_slot(decided) {
            self.automaton.set_state(state);
        }
        for (origin, seq, cmd) in batch {
            self.automaton.apply(origin, &cmd);
            self.applied.push(Delivered { origin, seq, value: cmd });
        }
        ctx.events.push(NodeEvent::RsmApply { tag, state_hash: state_hash(&self.automaton.get_state()) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProcSet;

    #[test]
    fn state_round_trip() {
        let mut a = KvAutomaton::default();
        a.apply(ProcessId(1), &Value::from_static("x+3"));
        let s = a.get_state();
        let mut b = KvAutomaton::default();
        assert_eq!(b, KvAutomaton::default());
        assert!(b.set_state(&s));
        assert_eq!(b.get_state(), s);
        assert!(!b.set_state(b"garbage"));
        assert_eq!(b.get_state(), s);
    }

    #[test]
    fn identical_histories_give_identical_snapshots() {
        let cmds = ["a+1", "b+2", "a+-5", "noise"];
        let run = || {
            let mut a = KvAutomaton::default();
            for (i, c) in cmds.iter().enumerate() {
                a.apply(ProcessId(i as u32 % 3), &Value::from_static(c));
            }
            a.get_state()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn slot_codec() {
        let r = ReadyVector(vec![1, 2, 3]);
        let v = encode_slot(b"{}", &r);
        let (s, back) = decode_slot(&v).unwrap();
        assert_eq!((s, back), (&b"{}"[..], r));
        assert!(decode_slot(&Value::from_static("zz")).is_none());
    }

    #[test]
    fn delivery_adopts_agreed_state_first() {
        let mut agreed = KvAutomaton::default();
        agreed.apply(ProcessId(0), &Value::from_static("k+10"));
        let mut rep = Replica::new(KvAutomaton::default());
        rep.automaton.counters.insert("corrupt".into(), 99);
        let v = encode_slot(&agreed.get_state(), &ReadyVector::zeros(3));
        let mut ctx = StepCtx::new(ProcessId(1), 3, 0, ProcSet::full(3));
        rep.deliver(1, &v, vec![(ProcessId(2), 1, Value::from_static("k+1"))], &mut ctx);
        assert_eq!(rep.automaton.counters.get("k"), Some(&11));
        assert!(!rep.automaton.counters.contains_key("corrupt"));
    }
}
