//! Shared domain vocabulary: process identifiers, opaque proposal values,
//! the three-valued consensus result and the message envelope.

use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a process in `0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ProcessId {
    fn from(i: usize) -> Self {
        ProcessId(i as u32)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Largest system size the simulator supports (trusted sets are `u64` bitmasks).
pub const MAX_PROCESSES: usize = 64;

/// A set of processes, stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcSet(pub u64);

impl ProcSet {
    pub const EMPTY: ProcSet = ProcSet(0);

    pub fn full(n: usize) -> Self {
        if n >= 64 {
            ProcSet(u64::MAX)
        } else {
            ProcSet((1u64 << n) - 1)
        }
    }

    #[inline]
    pub fn contains(self, p: ProcessId) -> bool {
        p.0 < 64 && self.0 & (1u64 << p.0) != 0
    }

    #[inline]
    pub fn insert(&mut self, p: ProcessId) {
        if p.0 < 64 {
            self.0 |= 1u64 << p.0;
        }
    }

    #[inline]
    pub fn remove(&mut self, p: ProcessId) {
        if p.0 < 64 {
            self.0 &= !(1u64 << p.0);
        }
    }

    #[inline]
    pub fn is_superset(self, other: ProcSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ProcessId> {
        let bits = self.0;
        (0..64u32).filter(move |i| bits & (1u64 << i) != 0).map(ProcessId)
    }
}

impl FromIterator<ProcessId> for ProcSet {
    fn from_iter<I: IntoIterator<Item = ProcessId>>(iter: I) -> Self {
        let mut s = ProcSet::EMPTY;
        for p in iter {
            s.insert(p);
        }
        s
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValueError {
    #[error("proposal values must be non-empty")]
    Empty,
}

/// An opaque, non-empty proposal value. Consensus never inspects the payload.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Value(Bytes);

impl Value {
    pub fn new(bytes: impl Into<Bytes>) -> Result<Self, ValueError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(ValueError::Empty);
        }
        Ok(Value(bytes))
    }

    /// Panics on empty input; for literals in tests and workloads.
    pub fn from_static(s: &'static str) -> Self {
        Value::new(Bytes::from_static(s.as_bytes())).expect("non-empty literal")
    }

    pub fn from_string(s: String) -> Self {
        Value::new(Bytes::from(s)).expect("non-empty value")
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Bytes {
        self.0
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) if s.chars().all(|c| !c.is_control()) => write!(f, "{s:?}"),
            _ => write!(f, "0x{}", hex::encode(&self.0)),
        }
    }
}

/// Outcome of querying a multivalued consensus object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ConsensusResult {
    /// No decision is available yet, or the object is inactive.
    Bot,
    /// The object detected an inconsistency left by a transient fault.
    TransientError,
    Decided(Value),
}

impl ConsensusResult {
    pub fn is_bot(&self) -> bool {
        matches!(self, ConsensusResult::Bot)
    }

    pub fn decided(&self) -> Option<&Value> {
        match self {
            ConsensusResult::Decided(v) => Some(v),
            _ => None,
        }
    }
}

/// Structural equality over values and sentinels; sentinels equal only themselves.
pub fn value_equals(a: &ConsensusResult, b: &ConsensusResult) -> bool {
    a == b
}

/// Which URB instance a transport message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Dissemination of `PROPOSAL` messages of consensus objects.
    Proposal,
    /// FIFO-ordered application payloads of the total-order layer.
    Fifo,
}

/// Per-sender FIFO sequence numbers, one entry per process.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReadyVector(pub Vec<u64>);

impl ReadyVector {
    pub fn zeros(n: usize) -> Self {
        ReadyVector(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entry `j`, treating missing entries as zero.
    pub fn get(&self, j: usize) -> u64 {
        self.0.get(j).copied().unwrap_or(0)
    }

    /// Entrywise minimum over a non-empty collection, normalized to `n` entries.
    pub fn entrywise_min<'a>(n: usize, vs: impl IntoIterator<Item = &'a ReadyVector>) -> Self {
        let mut out: Option<Vec<u64>> = None;
        for v in vs {
            let cur = out.get_or_insert_with(|| vec![u64::MAX; n]);
            for (j, slot) in cur.iter_mut().enumerate() {
                *slot = (*slot).min(v.get(j));
            }
        }
        ReadyVector(out.unwrap_or_else(|| vec![0; n]))
    }

    /// Canonical fixed-width encoding (8 bytes per entry, sender order).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() * 8);
        for x in &self.0 {
            out.extend_from_slice(&x.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(8) {
            return None;
        }
        Some(ReadyVector(
            bytes
                .chunks_exact(8)
                .map(|c| u64::from_be_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ))
    }
}

/// Payload carried by a URB transmission.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UrbPayload {
    /// `PROPOSAL(v)` of the consensus object identified by the envelope tag.
    Proposal(Option<Value>),
    /// An application message wrapped for total-order delivery.
    App(Value),
}

impl UrbPayload {
    pub fn stream(&self) -> Stream {
        match self {
            UrbPayload::Proposal(_) => Stream::Proposal,
            UrbPayload::App(_) => Stream::Fifo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum MessageKind {
    Sync {
        sn: u64,
    },
    SyncAck {
        sn: u64,
        seq: u64,
        obs_s: u64,
        ready: ReadyVector,
    },
    UrbData {
        origin: ProcessId,
        seq: u64,
        payload: UrbPayload,
    },
    UrbAck {
        stream: Stream,
        origin: ProcessId,
        seq: u64,
        delivered: bool,
    },
}

/// A point-to-point message. `tag` is the consensus sequence number the
/// message belongs to (zero when not tied to an object).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub sender: ProcessId,
    pub dest: ProcessId,
    pub tag: u64,
    pub kind: MessageKind,
}

/// Outcome of a consensus result that the application observed; shorthand for traces.
pub fn result_label(r: &ConsensusResult) -> &'static str {
    match r {
        ConsensusResult::Bot => "bot",
        ConsensusResult::TransientError => "transient_error",
        ConsensusResult::Decided(_) => "decided",
    }
}
