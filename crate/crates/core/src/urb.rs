//! Uniform reliable broadcast with FIFO readiness tracking.
//!
//! Every holder of a message keeps retransmitting it to trusted processes
//! that have not yet confirmed delivery. A holder delivers once it has
//! learned that every trusted process stores a copy, which is what makes
//! delivery uniform: a crashed deliverer cannot be the only one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{Message, MessageKind, ProcSet, ProcessId, ReadyVector, Stream, UrbPayload, Value};

/// Identifier returned by [`UrbService::broadcast`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxDescriptor {
    pub sender: ProcessId,
    pub seq: u64,
    pub tag: u64,
}

/// Outgoing message plus the harness-only provenance bit. `forged` marks
/// traffic that descends from injected state; protocol code never reads it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub msg: Message,
    pub forged: bool,
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<Envelope>,
}

impl Outbox {
    pub fn push(&mut self, msg: Message, forged: bool) {
        self.sends.push(Envelope { msg, forged });
    }
}

/// Set of delivered sequence numbers, compacted below a low-water mark.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqSet {
    low: u64,
    above: BTreeSet<u64>,
}

impl SeqSet {
    pub fn contains(&self, s: u64) -> bool {
        s <= self.low || self.above.contains(&s)
    }

    pub fn insert(&mut self, s: u64) {
        if s <= self.low {
            return;
        }
        self.above.insert(s);
        while self.above.remove(&(self.low + 1)) {
            self.low += 1;
        }
    }

    pub fn max(&self) -> u64 {
        self.above.last().copied().unwrap_or(self.low).max(self.low)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Record {
    pub tag: u64,
    pub payload: UrbPayload,
    pub stored: ProcSet,
    pub delivered: ProcSet,
    pub local_delivered: bool,
    pub forged: bool,
}

/// A message handed to the layer above.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub origin: ProcessId,
    pub seq: u64,
    pub tag: u64,
    pub payload: UrbPayload,
    pub forged: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadyEntry {
    pub tag: u64,
    pub value: Value,
}

/// One URB instance (one stream) at one process.
#[derive(Clone, Debug)]
pub struct UrbService {
    me: ProcessId,
    n: usize,
    stream: Stream,
    trusted: ProcSet,
    pub(crate) next_seq: u64,
    pub(crate) records: BTreeMap<(ProcessId, u64), Record>,
    marks: Vec<SeqSet>,
    // FIFO readiness, used by the Fifo stream only.
    ready: Vec<BTreeMap<u64, ReadyEntry>>,
    consumed: Vec<u64>,
    /// Local URB operations performed (broadcasts and deliveries).
    pub accesses: u64,
}

impl UrbService {
    pub fn new(me: ProcessId, n: usize, stream: Stream) -> Self {
        UrbService {
            me,
            n,
            stream,
            trusted: ProcSet::full(n),
            next_seq: 0,
            records: BTreeMap::new(),
            marks: vec![SeqSet::default(); n],
            ready: vec![BTreeMap::new(); n],
            consumed: vec![0; n],
            accesses: 0,
        }
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn set_trusted(&mut self, trusted: ProcSet) {
        self.trusted = trusted;
    }

    pub fn broadcast(&mut self, tag: u64, payload: UrbPayload, forged: bool) -> TxDescriptor {
        debug_assert_eq!(payload.stream(), self.stream);
        // A corrupted counter may lag behind sequence numbers already in use;
        // skip past them so receivers do not discard the new message as a duplicate.
        let known = self
            .records
            .keys()
            .filter(|(o, _)| *o == self.me)
            .map(|(_, s)| *s)
            .max()
            .unwrap_or(0)
            .max(self.marks[self.me.index()].max());
        self.next_seq = self.next_seq.max(known) + 1;
        let seq = self.next_seq;
        let mut stored = ProcSet::EMPTY;
        stored.insert(self.me);
        self.records.insert(
            (self.me, seq),
            Record {
                tag,
                payload,
                stored,
                delivered: ProcSet::EMPTY,
                local_delivered: false,
                forged,
            },
        );
        self.accesses += 1;
        TxDescriptor { sender: self.me, seq, tag }
    }

    /// True once every trusted process confirmed delivery. Descriptors this
    /// instance no longer tracks count as terminated so that stale state left
    /// by a transient fault cannot block the caller forever.
    pub fn has_terminated(&self, tx: &TxDescriptor) -> bool {
        if tx.sender != self.me {
            return true;
        }
        match self.records.get(&(self.me, tx.seq)) {
            Some(r) => r.delivered.is_superset(self.trusted),
            None => true,
        }
    }

    pub fn all_have_terminated(&self) -> bool {
        self.records
            .iter()
            .filter(|((o, _), _)| *o == self.me)
            .all(|(_, r)| r.delivered.is_superset(self.trusted))
    }

    /// Deliver every held message that all trusted processes are known to store.
    pub fn deliver_ready(&mut self) -> Vec<Delivery> {
        let mut deliveries = Vec::new();
        let trusted = self.trusted;
        for (&(origin, seq), r) in self.records.iter_mut() {
            // Holding the record means storing it, whatever a corrupted set says.
            r.stored.insert(self.me);
            if r.local_delivered || !r.stored.is_superset(trusted) {
                continue;
            }
            r.local_delivered = true;
            r.delivered.insert(self.me);
            self.accesses += 1;
            self.marks[origin.index()].insert(seq);
            match &r.payload {
                UrbPayload::App(v) if self.stream == Stream::Fifo => {
                    self.ready[origin.index()].insert(seq, ReadyEntry { tag: r.tag, value: v.clone() });
                }
                _ => deliveries.push(Delivery {
                    origin,
                    seq,
                    tag: r.tag,
                    payload: r.payload.clone(),
                    forged: r.forged,
                }),
            }
        }
        deliveries
    }

    /// Deliver, retransmit and forget completed messages. Call once per
    /// activation of the owning process.
    pub fn activate(&mut self, out: &mut Outbox) -> Vec<Delivery> {
        let deliveries = self.deliver_ready();
        let trusted = self.trusted;
        let me = self.me;
        self.records.retain(|&(origin, seq), r| {
            if r.delivered.is_superset(trusted) {
                return false;
            }
            for p in trusted.iter() {
                if p != me && !r.delivered.contains(p) {
                    out.push(
                        Message {
                            sender: me,
                            dest: p,
                            tag: r.tag,
                            kind: MessageKind::UrbData { origin, seq, payload: r.payload.clone() },
                        },
                        r.forged,
                    );
                }
            }
            true
        });
        deliveries
    }

    pub fn on_data(
        &mut self,
        from: ProcessId,
        tag: u64,
        origin: ProcessId,
        seq: u64,
        payload: UrbPayload,
        forged: bool,
        out: &mut Outbox,
    ) {
        if origin.index() >= self.n || payload.stream() != self.stream {
            return;
        }
        let delivered = match self.records.get_mut(&(origin, seq)) {
            Some(r) => {
                r.stored.insert(from);
                r.local_delivered
            }
            None if self.marks[origin.index()].contains(seq) => true,
            None => {
                let mut stored = ProcSet::EMPTY;
                stored.insert(self.me);
                stored.insert(from);
                for p in self.trusted.iter() {
                    if !stored.contains(p) {
                        out.push(
                            Message {
                                sender: self.me,
                                dest: p,
                                tag,
                                kind: MessageKind::UrbData { origin, seq, payload: payload.clone() },
                            },
                            forged,
                        );
                    }
                }
                self.records.insert(
                    (origin, seq),
                    Record {
                        tag,
                        payload,
                        stored,
                        delivered: ProcSet::EMPTY,
                        local_delivered: false,
                        forged,
                    },
                );
                false
            }
        };
        out.push(
            Message {
                sender: self.me,
                dest: from,
                tag,
                kind: MessageKind::UrbAck { stream: self.stream, origin, seq, delivered },
            },
            forged,
        );
    }

    pub fn on_ack(&mut self, from: ProcessId, origin: ProcessId, seq: u64, delivered: bool) {
        if let Some(r) = self.records.get_mut(&(origin, seq)) {
            r.stored.insert(from);
            if delivered {
                r.delivered.insert(from);
            }
        }
    }

    /// Exclusive watermark: entry `j` is the last sequence number from `p_j`
    /// already handed to the application.
    pub fn ready_min(&self) -> ReadyVector {
        ReadyVector(self.consumed.clone())
    }

    /// Highest contiguous ready sequence number per sender.
    pub fn fifo_ready(&self) -> ReadyVector {
        ReadyVector(
            (0..self.n)
                .map(|j| {
                    let mut s = self.consumed[j];
                    while self.ready[j].contains_key(&(s + 1)) {
                        s += 1;
                    }
                    s
                })
                .collect(),
        )
    }

    /// Number of ready but not yet consumed messages.
    pub fn ready_backlog(&self) -> u64 {
        let hi = self.fifo_ready();
        (0..self.n).map(|j| hi.0[j] - self.consumed[j]).sum()
    }

    fn clamp(&self, r_max: &ReadyVector) -> Vec<u64> {
        let hi = self.fifo_ready();
        (0..self.n).map(|j| r_max.get(j).clamp(self.consumed[j], hi.0[j])).collect()
    }

    /// Messages between the consumed watermark and `r_max` (clamped into the
    /// ready band), sender-major then by sequence number.
    pub fn bulk_read(&self, r_max: &ReadyVector) -> Vec<(ProcessId, u64, Value)> {
        let upto = self.clamp(r_max);
        let mut out = Vec::new();
        for (j, &hi) in upto.iter().enumerate() {
            for s in self.consumed[j] + 1..=hi {
                let e = &self.ready[j][&s];
                out.push((ProcessId::from(j), s, e.value.clone()));
            }
        }
        out
    }

    /// [`bulk_read`](Self::bulk_read) and advance the consumed watermark past the batch.
    pub fn take_batch(&mut self, r_max: &ReadyVector) -> Vec<(ProcessId, u64, Value)> {
        let batch = self.bulk_read(r_max);
        let upto = self.clamp(r_max);
        for (j, hi) in upto.into_iter().enumerate() {
            self.ready[j].retain(|&s, _| s > hi);
            self.consumed[j] = hi;
        }
        batch
    }

    /// True while some held message with this tag awaits local delivery.
    pub fn awaits_tag(&self, tag: u64) -> bool {
        self.records.values().any(|r| r.tag == tag && !r.local_delivered)
    }

    pub fn pending_records(&self) -> usize {
        self.records.len()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }
}
