//! Total-order uniform reliable broadcast by repeated multivalued consensus
//! over a ring of three consensus objects.
//!
//! Each iteration queries every trusted process with `SYNC`, aggregates the
//! replies, and either agrees on the next readiness vector or delivers the
//! batch fixed by the oldest undelivered object.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bc::{BcKey, BcObject};
use crate::mv::{MvSlot, Variant};
use crate::node::{Node, NodeEvent, StepCtx, UrbEnv};
use crate::types::{ConsensusResult, Message, MessageKind, ProcSet, ProcessId, ReadyVector, Stream, UrbPayload, Value};
use crate::urb::{Delivery, Envelope, UrbService};

/// Size of the consensus object ring.
pub const M: usize = 3;

pub const DEFAULT_DELTA: u64 = 8;

/// Application side of the total-order layer.
pub trait Sink {
    /// Value proposed for the next consensus instance.
    fn proposal(&self, all_ready: &ReadyVector) -> Value;
    /// The readiness bound inside a decided value, `None` when undecodable.
    fn ready_vector(&self, decided: &Value) -> Option<ReadyVector>;
    fn deliver(&mut self, tag: u64, decided: &Value, batch: Vec<(ProcessId, u64, Value)>, ctx: &mut StepCtx);
}

/// One entry of a total-order delivery log.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Delivered {
    pub origin: ProcessId,
    pub seq: u64,
    pub value: Value,
}

/// Sink that records deliveries in order.
#[derive(Clone, Debug, Default)]
pub struct TotalOrderLog {
    pub log: Vec<Delivered>,
}

impl Sink for TotalOrderLog {
    fn proposal(&self, all_ready: &ReadyVector) -> Value {
        Value::new(all_ready.encode()).unwrap_or_else(|_| Value::new(vec![0u8; 8]).expect("non-empty"))
    }

    fn ready_vector(&self, decided: &Value) -> Option<ReadyVector> {
        ReadyVector::decode(decided.as_bytes())
    }

    fn deliver(&mut self, _tag: u64, _decided: &Value, batch: Vec<(ProcessId, u64, Value)>, _ctx: &mut StepCtx) {
        self.log.extend(batch.into_iter().map(|(origin, seq, value)| Delivered { origin, seq, value }));
    }
}

/// A reply to `SYNC(sn)` as recorded by the querier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckTuple {
    pub seq: u64,
    pub obs_s: u64,
    pub ready: ReadyVector,
    #[serde(skip)]
    pub forged: bool,
}

/// Locals computed from the last complete set of replies.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregate {
    pub max_seq: u64,
    pub all_seq: BTreeSet<u64>,
    pub all_ready: ReadyVector,
}

#[derive(Clone, Debug)]
pub struct ToUrbNode<S> {
    pub me: ProcessId,
    pub n: usize,
    pub cs: Vec<MvSlot>,
    pub obs_s: u64,
    pub sn: u64,
    pub delta: u64,
    pub acks: BTreeMap<ProcessId, AckTuple>,
    pub querying: bool,
    pub last: Option<Aggregate>,
    pub urb_prop: UrbService,
    pub urb_fifo: UrbService,
    pub sink: S,
    pub variant: Variant,
    trusted: ProcSet,
}

impl<S: Sink> ToUrbNode<S> {
    pub fn new(me: ProcessId, n: usize, delta: u64, variant: Variant, sink: S) -> Self {
        ToUrbNode {
            me,
            n,
            cs: (0..M).map(|_| MvSlot::new(n)).collect(),
            obs_s: 0,
            sn: 0,
            delta,
            acks: BTreeMap::new(),
            querying: false,
            last: None,
            urb_prop: UrbService::new(me, n, Stream::Proposal),
            urb_fifo: UrbService::new(me, n, Stream::Fifo),
            sink,
            variant,
            trusted: ProcSet::full(n),
        }
    }

    pub fn s_set(&self) -> BTreeSet<u64> {
        self.cs.iter().filter_map(MvSlot::tag).collect()
    }

    pub fn get_seq(&self) -> u64 {
        self.s_set().into_iter().fold(self.obs_s, u64::max)
    }

    pub fn check_seq(&self, s: u64) -> bool {
        self.s_set().contains(&s) || s == self.get_seq().wrapping_add(1)
    }

    pub fn exceed(&self) -> bool {
        let l = self.urb_fifo.ready_backlog();
        (self.urb_fifo.all_have_terminated() && l > 0) || self.delta <= l
    }

    pub fn active_slots(&self) -> usize {
        self.cs.iter().filter(|s| s.is_active()).count()
    }

    pub fn to_broadcast(&mut self, m: Value, ctx: &mut StepCtx) {
        let tx = self.urb_fifo.broadcast(0, UrbPayload::App(m), false);
        ctx.events.push(NodeEvent::ToBroadcast { seq: tx.seq });
    }

    fn scrub(&mut self, ctx: &mut StepCtx) {
        let misplaced = self
            .cs
            .iter()
            .enumerate()
            .any(|(k, s)| s.tag().is_some_and(|t| t % M as u64 != k as u64));
        let seqs = self.s_set();
        let bad_range = match (seqs.first(), seqs.last()) {
            (Some(&lo), Some(&hi)) => self.obs_s > hi || hi - lo > 1,
            _ => false,
        };
        if misplaced || bad_range {
            for s in self.cs.iter_mut() {
                s.deactivate();
            }
            ctx.events.push(NodeEvent::Scrub);
        }
    }

    fn start_iteration(&mut self, ctx: &mut StepCtx) {
        self.scrub(ctx);
        self.sn = self.sn.wrapping_add(1);
        self.acks.clear();
        self.querying = true;
        self.send_sync(ctx);
    }

    fn send_sync(&self, ctx: &mut StepCtx) {
        for p in self.trusted.iter() {
            if p != self.me && !self.acks.contains_key(&p) {
                ctx.out.push(
                    Message { sender: self.me, dest: p, tag: 0, kind: MessageKind::Sync { sn: self.sn } },
                    false,
                );
            }
        }
    }

    fn acks_complete(&self) -> bool {
        self.trusted.iter().all(|p| p == self.me || self.acks.contains_key(&p))
    }

    /// One behind a peer that already recycled `z`, with nothing left here
    /// that could ever rebuild object `z`. Only corrupted state gets here.
    fn stranded(&self, z: u64, replies: &[&AckTuple]) -> bool {
        let slot = &self.cs[(z % M as u64) as usize];
        slot.tag() != Some(z) && !self.urb_prop.awaits_tag(z) && replies.iter().any(|a| a.obs_s >= z)
    }

    fn finish_iteration(&mut self, ctx: &mut StepCtx) {
        let own = AckTuple {
            seq: self.get_seq(),
            obs_s: self.obs_s,
            ready: self.urb_fifo.fifo_ready(),
            forged: false,
        };
        let replies: Vec<&AckTuple> = self
            .acks
            .iter()
            .filter(|(p, _)| self.trusted.contains(**p))
            .map(|(_, a)| a)
            .chain(std::iter::once(&own))
            .collect();
        let tainted = replies.iter().any(|a| a.forged);
        let all_ready = ReadyVector::entrywise_min(self.n, replies.iter().map(|a| &a.ready));
        let max_seq = replies.iter().map(|a| a.seq).max().unwrap_or(0);
        let all_seq: BTreeSet<u64> = replies.iter().flat_map(|a| [a.seq, a.obs_s]).collect();

        let (x, y, z) = (self.obs_s, self.get_seq(), max_seq);
        let consistent = (x.wrapping_add(1) == y && y == z) || (x == y && y == z) || (x == y && y.wrapping_add(1) == z);
        if !consistent {
            self.obs_s = x.max(y).max(z);
        } else if x == y && y.wrapping_add(1) == z && self.stranded(z, &replies) {
            self.obs_s = z;
        }
        if self.obs_s != x {
            ctx.events.push(NodeEvent::ObsJump { from: x, to: self.obs_s });
        }

        let unanimous = all_seq.len() == 1;
        let get_seq = self.get_seq();
        let mut keep = [false; M];
        for (k, s) in self.cs.iter().enumerate() {
            if let Some(t) = s.tag() {
                if self.obs_s <= t && t <= get_seq {
                    keep[k] = true;
                }
            }
        }
        if unanimous {
            keep[(max_seq.wrapping_add(1) % M as u64) as usize] = true;
        }
        for (k, s) in self.cs.iter_mut().enumerate() {
            if !keep[k] {
                s.deactivate();
            }
        }

        if unanimous && self.exceed() {
            let tag = max_seq.wrapping_add(1);
            let slot = &mut self.cs[(tag % M as u64) as usize];
            if !slot.is_active() {
                slot.propose(tag, self.sink.proposal(&all_ready));
                if let Some(o) = slot.object.as_mut() {
                    o.forged = tainted;
                }
                ctx.events.push(NodeEvent::CsPropose { tag });
            }
        }

        let next = self.obs_s.wrapping_add(1);
        if next == self.get_seq() {
            let slot = &self.cs[(next % M as u64) as usize];
            let r = slot.result();
            if r != ConsensusResult::Bot {
                let tag = slot.tag().unwrap_or(next);
                let mut count = 0;
                if let ConsensusResult::Decided(v) = &r {
                    if let Some(rv) = self.sink.ready_vector(v) {
                        let batch = self.urb_fifo.take_batch(&rv);
                        count = batch.len();
                        self.sink.deliver(tag, v, batch, ctx);
                    }
                }
                ctx.events.push(NodeEvent::ToDeliver {
                    tag,
                    count,
                    transient_error: r == ConsensusResult::TransientError,
                });
                self.obs_s = next;
                for s in self.cs.iter_mut() {
                    if s.tag().is_some_and(|t| t < next) {
                        s.deactivate();
                    }
                }
            }
        }

        self.last = Some(Aggregate { max_seq, all_seq, all_ready });
        self.querying = false;
        ctx.iteration_done = true;
    }

    fn on_proposal_delivery(&mut self, d: Delivery) {
        let UrbPayload::Proposal(v) = d.payload else { return };
        let s = d.tag;
        if !self.check_seq(s) {
            return;
        }
        // Opening a third sequence number would break the window; no legal
        // peer proposes past a slot we still hold undelivered.
        if !self.s_set().contains(&s) && self.get_seq() > self.obs_s {
            return;
        }
        let slot = &mut self.cs[(s % M as u64) as usize];
        if slot.tag().is_none_or(|t| t == s) {
            slot.on_proposal(s, d.origin, v, d.forged);
        }
    }

    fn handle_deliveries(&mut self, ds: Vec<Delivery>, ctx: &mut StepCtx) {
        for d in ds {
            ctx.events.push(NodeEvent::UrbDeliver {
                stream: Stream::Proposal,
                origin: d.origin.0,
                seq: d.seq,
                tag: d.tag,
            });
            self.on_proposal_delivery(d);
        }
    }

    fn run_objects(&mut self, ctx: &mut StepCtx) {
        for slot in self.cs.iter_mut() {
            let mut env = UrbEnv { urb: &mut self.urb_prop, ctx };
            slot.do_forever(&mut env, self.variant);
        }
    }
}

impl<S: Sink> Node for ToUrbNode<S> {
    fn activate(&mut self, ctx: &mut StepCtx) {
        self.trusted = ctx.trusted;
        self.urb_prop.set_trusted(ctx.trusted);
        self.urb_fifo.set_trusted(ctx.trusted);
        let ds = self.urb_prop.activate(&mut ctx.out);
        self.handle_deliveries(ds, ctx);
        self.urb_fifo.activate(&mut ctx.out);
        if !self.querying {
            self.start_iteration(ctx);
        } else if self.acks_complete() {
            self.finish_iteration(ctx);
            self.start_iteration(ctx);
        } else {
            self.send_sync(ctx);
        }
        self.run_objects(ctx);
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut StepCtx) {
        let Envelope { msg, forged } = env;
        let from = msg.sender;
        match msg.kind {
            MessageKind::Sync { sn } => {
                ctx.out.push(
                    Message {
                        sender: self.me,
                        dest: from,
                        tag: 0,
                        kind: MessageKind::SyncAck {
                            sn,
                            seq: self.get_seq(),
                            obs_s: self.obs_s,
                            ready: self.urb_fifo.fifo_ready(),
                        },
                    },
                    forged,
                );
            }
            MessageKind::SyncAck { sn, seq, obs_s, ready } => {
                if self.querying && sn == self.sn {
                    self.acks.insert(from, AckTuple { seq, obs_s, ready, forged });
                }
            }
            MessageKind::UrbData { origin, seq, payload } => {
                let urb = match payload.stream() {
                    Stream::Proposal => &mut self.urb_prop,
                    Stream::Fifo => &mut self.urb_fifo,
                };
                urb.on_data(from, msg.tag, origin, seq, payload, forged, &mut ctx.out);
                let ds = urb.deliver_ready();
                if urb.stream() == Stream::Proposal {
                    self.handle_deliveries(ds, ctx);
                }
            }
            MessageKind::UrbAck { stream, origin, seq, delivered } => {
                let urb = match stream {
                    Stream::Proposal => &mut self.urb_prop,
                    Stream::Fifo => &mut self.urb_fifo,
                };
                urb.on_ack(from, origin, seq, delivered);
                let ds = urb.deliver_ready();
                if stream == Stream::Proposal {
                    self.handle_deliveries(ds, ctx);
                }
            }
        }
    }

    fn on_bc_decide(&mut self, key: BcKey, value: bool, _ctx: &mut StepCtx) {
        let slot = &mut self.cs[(key.tag % M as u64) as usize];
        slot.on_bc_decide(key.tag, key.index as usize, value);
    }

    fn pending_bc(&self) -> Vec<(BcKey, bool)> {
        let mut out = Vec::new();
        for slot in &self.cs {
            if let Some(o) = &slot.object {
                for (i, b) in o.bc.iter().enumerate() {
                    if let BcObject::Active { my_proposal, decided: None } = b {
                        out.push((BcKey { tag: o.tag, index: i as u64 }, *my_proposal));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node() -> ToUrbNode<TotalOrderLog> {
        ToUrbNode::new(ProcessId(0), 3, 4, Variant::Sequential, TotalOrderLog::default())
    }

    fn ctx() -> StepCtx {
        StepCtx::new(ProcessId(0), 3, 0, ProcSet::full(3))
    }

    #[test]
    fn macros_on_empty_ring() {
        let mut t = node();
        t.obs_s = 7;
        assert!(t.s_set().is_empty());
        assert_eq!(t.get_seq(), 7);
        assert!(t.check_seq(8));
        assert!(!t.check_seq(9));
    }

    #[test]
    fn misplaced_slot_resets_ring() {
        let mut t = node();
        t.cs[0].propose(4, Value::from_static("x"));
        t.cs[2].propose(5, Value::from_static("y"));
        t.scrub(&mut ctx());
        assert_eq!(t.active_slots(), 0);
    }

    #[test]
    fn scrub_keeps_legal_ring() {
        let mut t = node();
        t.obs_s = 5;
        t.cs[2].propose(5, Value::from_static("x"));
        t.cs[0].propose(6, Value::from_static("y"));
        t.scrub(&mut ctx());
        assert_eq!(t.active_slots(), 2);
        t.obs_s = 7;
        t.scrub(&mut ctx());
        assert_eq!(t.active_slots(), 0);
    }

    #[test]
    fn sync_is_answered_with_locals() {
        let mut t = node();
        t.obs_s = 5;
        let mut c = ctx();
        let m = Message { sender: ProcessId(1), dest: ProcessId(0), tag: 0, kind: MessageKind::Sync { sn: 9 } };
        t.on_message(Envelope { msg: m, forged: false }, &mut c);
        assert_eq!(
            c.out.sends[0].msg.kind,
            MessageKind::SyncAck { sn: 9, seq: 5, obs_s: 5, ready: ReadyVector::zeros(3) }
        );
    }

    #[test]
    fn stale_acks_are_dropped() {
        let mut t = node();
        t.querying = true;
        t.sn = 4;
        let mut c = ctx();
        let ack = |sn| Message {
            sender: ProcessId(1),
            dest: ProcessId(0),
            tag: 0,
            kind: MessageKind::SyncAck { sn, seq: 0, obs_s: 0, ready: ReadyVector::zeros(3) },
        };
        t.on_message(Envelope { msg: ack(3), forged: false }, &mut c);
        assert!(t.acks.is_empty());
        t.on_message(Envelope { msg: ack(4), forged: false }, &mut c);
        assert_eq!(t.acks.len(), 1);
    }

    #[test]
    fn exceed_disjuncts() {
        let mut t = node();
        assert!(!t.exceed());
        // One ready message from p1, nothing of ours in flight.
        t.urb_fifo.on_data(ProcessId(1), 0, ProcessId(1), 1, UrbPayload::App(Value::from_static("m")), false, &mut Default::default());
        t.urb_fifo.on_ack(ProcessId(2), ProcessId(1), 1, false);
        t.urb_fifo.deliver_ready();
        assert_eq!(t.urb_fifo.ready_backlog(), 1);
        assert!(t.exceed());
        // Own transmission pending, backlog below delta.
        t.urb_fifo.broadcast(0, UrbPayload::App(Value::from_static("mine")), false);
        assert!(!t.exceed());
    }

    #[test]
    fn unanimous_replies_start_next_instance() {
        // All three report seq = obsS = 5 and one message is ready everywhere.
        let mut t = node();
        t.obs_s = 5;
        t.urb_fifo.on_data(ProcessId(1), 0, ProcessId(1), 1, UrbPayload::App(Value::from_static("m")), false, &mut Default::default());
        t.urb_fifo.on_ack(ProcessId(2), ProcessId(1), 1, false);
        t.urb_fifo.deliver_ready();
        t.querying = true;
        t.sn = 1;
        for p in [1, 2] {
            t.acks.insert(
                ProcessId(p),
                AckTuple { seq: 5, obs_s: 5, ready: ReadyVector(vec![0, 1, 0]), forged: false },
            );
        }
        let mut c = ctx();
        t.finish_iteration(&mut c);
        let o = t.cs[0].object.as_ref().expect("slot 0 proposed");
        assert_eq!(o.tag, 6);
        assert_eq!(o.v, Some(Value::new(ReadyVector(vec![0, 1, 0]).encode()).unwrap()));
        assert_eq!(t.last.as_ref().unwrap().all_seq, BTreeSet::from([5]));
    }

    #[test]
    fn transient_error_slot_is_recycled_without_delivery() {
        let mut t = node();
        t.obs_s = 5;
        t.cs[0].propose(6, Value::from_static("x"));
        t.cs[0].object.as_mut().unwrap().v = None;
        assert_eq!(t.cs[0].result(), ConsensusResult::TransientError);
        t.querying = true;
        for p in [1, 2] {
            t.acks.insert(ProcessId(p), AckTuple { seq: 6, obs_s: 5, ready: ReadyVector::zeros(3), forged: false });
        }
        t.finish_iteration(&mut ctx());
        assert_eq!(t.obs_s, 6);
        assert!(t.sink.log.is_empty());
    }

    #[test]
    fn inconsistent_triple_jumps_obs() {
        let mut t = node();
        t.obs_s = 2;
        t.querying = true;
        for p in [1, 2] {
            t.acks.insert(ProcessId(p), AckTuple { seq: 9, obs_s: 9, ready: ReadyVector::zeros(3), forged: false });
        }
        t.finish_iteration(&mut ctx());
        assert_eq!(t.obs_s, 9);
    }

    fn acks(t: &mut ToUrbNode<TotalOrderLog>, seq: u64, obs_s: u64) {
        t.querying = true;
        for p in [1, 2] {
            t.acks.insert(ProcessId(p), AckTuple { seq, obs_s, ready: ReadyVector::zeros(3), forged: false });
        }
    }

    #[test]
    fn laggard_without_the_object_catches_up() {
        // Peers already recycled 6; nothing here can rebuild it.
        let mut t = node();
        t.obs_s = 5;
        acks(&mut t, 6, 6);
        t.finish_iteration(&mut ctx());
        assert_eq!(t.obs_s, 6);
    }

    #[test]
    fn laggard_with_pending_proposal_waits() {
        let mut t = node();
        t.obs_s = 5;
        t.urb_prop.on_data(ProcessId(1), 6, ProcessId(1), 1, UrbPayload::Proposal(Some(Value::from_static("p"))), false, &mut Default::default());
        acks(&mut t, 6, 6);
        t.finish_iteration(&mut ctx());
        assert_eq!(t.obs_s, 5);
        // Peers still running 6 are no reason to move either.
        let mut t = node();
        t.obs_s = 5;
        acks(&mut t, 6, 5);
        t.finish_iteration(&mut ctx());
        assert_eq!(t.obs_s, 5);
    }

    fn proposal(tag: u64) -> Delivery {
        Delivery { origin: ProcessId(1), seq: 1, tag, payload: UrbPayload::Proposal(Some(Value::from_static("p"))), forged: false }
    }

    #[test]
    fn proposal_past_an_undelivered_slot_is_dropped() {
        let mut t = node();
        t.obs_s = 5;
        t.on_proposal_delivery(proposal(6));
        assert_eq!(t.s_set(), BTreeSet::from([6]));
        t.on_proposal_delivery(proposal(7));
        assert_eq!(t.s_set(), BTreeSet::from([6]));
    }

    #[test]
    fn delivery_recycles_older_slots() {
        let mut t = node();
        t.obs_s = 5;
        t.cs[2].propose(5, Value::from_static("old"));
        t.cs[0].propose(6, Value::from_static("x"));
        t.cs[0].object.as_mut().unwrap().v = None;
        acks(&mut t, 6, 5);
        t.finish_iteration(&mut ctx());
        assert_eq!(t.obs_s, 6);
        assert_eq!(t.s_set(), BTreeSet::from([6]));
    }
}
