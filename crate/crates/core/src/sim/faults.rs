//! Transient-fault injection. A recipe rewrites local state and channel
//! contents; program code is never touched.
//!
//! Readiness vectors planted by the injector never exceed the smallest FIFO
//! readiness among live processes. The FIFO stream and the delivery logs are
//! observation records, so they are left alone.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bc::BcObject;
use crate::mrt::MrtPc;
use crate::mv::{MvObject, MvSlot};
use crate::node::Node;
use crate::rsm::{KvAutomaton, Replica};
use crate::sim::nodes::{MrtNode, MvNode, ToDriver};
use crate::sim::world::World;
use crate::to_urb::{AckTuple, Sink, TotalOrderLog, M};
use crate::types::{Message, MessageKind, ProcSet, ProcessId, ReadyVector, Stream, UrbPayload, Value};
use crate::urb::{Envelope, Record, UrbService};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Leave the world unchanged.
    None,
    /// Every binary object in every local cache reads as decided `False`.
    AllBcFalse,
    /// Claim a broadcast already terminated when none was made.
    SkipBroadcast,
    /// Randomize local fields, URB records and channel contents.
    Random,
}

impl Recipe {
    pub fn label(self) -> &'static str {
        match self {
            Recipe::None => "none",
            Recipe::AllBcFalse => "all_bc_false",
            Recipe::SkipBroadcast => "skip_broadcast",
            Recipe::Random => "random",
        }
    }
}

/// State a recipe may rewrite.
pub trait Corruptible {
    /// FIFO readiness this process would report, if it has any.
    fn ready_floor(&self) -> Option<ReadyVector> {
        None
    }
    fn corrupt(&mut self, recipe: Recipe, rng: &mut ChaCha8Rng, cap: &ReadyVector);
    /// Messages to plant on channels leading to or from this process.
    fn forge(&self, _rng: &mut ChaCha8Rng, _cap: &ReadyVector) -> Vec<Message> {
        Vec::new()
    }
}

fn forged_value(rng: &mut ChaCha8Rng) -> Value {
    Value::from_string(format!("forged-{}", rng.gen_range(0..4)))
}

fn random_bc(rng: &mut ChaCha8Rng) -> BcObject {
    match rng.gen_range(0..4) {
        0 => BcObject::Inactive,
        1 => BcObject::Active { my_proposal: rng.gen(), decided: None },
        _ => BcObject::Active { my_proposal: rng.gen(), decided: Some(rng.gen()) },
    }
}

fn random_ready(rng: &mut ChaCha8Rng, cap: &ReadyVector) -> ReadyVector {
    ReadyVector(cap.0.iter().map(|&c| rng.gen_range(0..=c)).collect())
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> ProcSet {
    ProcSet(rng.gen::<u64>() & ProcSet::full(n).0)
}

fn random_other(rng: &mut ChaCha8Rng, me: ProcessId, n: usize) -> ProcessId {
    let k = rng.gen_range(1..n);
    ProcessId::from((me.index() + k) % n)
}

/// An arbitrary object for `tag`. Values come from `value`.
fn random_object(rng: &mut ChaCha8Rng, n: usize, tag: u64, mut value: impl FnMut(&mut ChaCha8Rng) -> Value) -> MvObject {
    let len = if rng.gen_bool(0.05) { rng.gen_range(0..n) } else { n };
    let mut o = MvObject::fresh(tag, n, value(rng));
    if rng.gen_bool(0.15) {
        o.v = None;
    }
    o.proposals = (0..len).map(|_| rng.gen_bool(0.5).then(|| value(rng))).collect();
    o.bc = (0..n).map(|_| random_bc(rng)).collect();
    o.tx = rng.gen_bool(0.5).then(|| crate::urb::TxDescriptor {
        sender: ProcessId::from(rng.gen_range(0..n)),
        seq: rng.gen_range(0..6),
        tag,
    });
    o.one_term = rng.gen();
    o.forged = true;
    o
}

fn corrupt_slot_recipe(slot: &mut MvSlot, recipe: Recipe) {
    let n = slot.n;
    if let Some(o) = slot.object.as_mut() {
        match recipe {
            Recipe::AllBcFalse => {
                o.bc = vec![BcObject::Active { my_proposal: false, decided: Some(false) }; n];
                o.forged = true;
            }
            Recipe::SkipBroadcast => {
                o.one_term = true;
                o.tx = None;
                o.forged = true;
            }
            Recipe::None | Recipe::Random => {}
        }
    }
}

/// Plant bogus proposal-stream records and scramble the sequence counter.
fn corrupt_urb(urb: &mut UrbService, rng: &mut ChaCha8Rng, n: usize, mut tag: impl FnMut(&mut ChaCha8Rng) -> u64, mut value: impl FnMut(&mut ChaCha8Rng) -> Value) {
    urb.next_seq = rng.gen_range(0..4);
    for _ in 0..rng.gen_range(0..3) {
        let origin = ProcessId::from(rng.gen_range(0..n));
        let seq = rng.gen_range(1..8);
        let local_delivered = rng.gen_bool(0.3);
        urb.records.insert(
            (origin, seq),
            Record {
                tag: tag(rng),
                payload: UrbPayload::Proposal(Some(value(rng))),
                stored: random_set(rng, n),
                delivered: random_set(rng, n),
                local_delivered,
                forged: true,
            },
        );
    }
}

fn forged_proposal(rng: &mut ChaCha8Rng, me: ProcessId, n: usize, tag: u64, v: Value) -> Message {
    Message {
        sender: random_other(rng, me, n),
        dest: me,
        tag,
        kind: MessageKind::UrbData {
            origin: ProcessId::from(rng.gen_range(0..n)),
            seq: rng.gen_range(1..8),
            payload: UrbPayload::Proposal(Some(v)),
        },
    }
}

fn forged_ack(rng: &mut ChaCha8Rng, me: ProcessId, n: usize, tag: u64) -> Message {
    Message {
        sender: random_other(rng, me, n),
        dest: me,
        tag,
        kind: MessageKind::UrbAck {
            stream: Stream::Proposal,
            origin: ProcessId::from(rng.gen_range(0..n)),
            seq: rng.gen_range(1..8),
            delivered: rng.gen(),
        },
    }
}

impl Corruptible for MvNode {
    fn corrupt(&mut self, recipe: Recipe, rng: &mut ChaCha8Rng, _cap: &ReadyVector) {
        let n = self.n;
        match recipe {
            Recipe::None => {}
            Recipe::AllBcFalse | Recipe::SkipBroadcast => {
                self.slot.propose(self.tag, self.value.clone());
                corrupt_slot_recipe(&mut self.slot, recipe);
            }
            Recipe::Random => {
                let tag = self.tag;
                self.slot.object = (!rng.gen_bool(0.2)).then(|| random_object(rng, n, tag, forged_value));
                corrupt_urb(&mut self.urb, rng, n, |_| tag, forged_value);
            }
        }
    }

    fn forge(&self, rng: &mut ChaCha8Rng, _cap: &ReadyVector) -> Vec<Message> {
        (0..rng.gen_range(0..4))
            .map(|_| {
                if rng.gen_bool(0.6) {
                    let v = forged_value(rng);
                    forged_proposal(rng, self.me, self.n, self.tag, v)
                } else {
                    forged_ack(rng, self.me, self.n, self.tag)
                }
            })
            .collect()
    }
}

impl Corruptible for MrtNode {
    fn corrupt(&mut self, recipe: Recipe, rng: &mut ChaCha8Rng, _cap: &ReadyVector) {
        let n = self.n;
        let b = self.round_budget;
        match recipe {
            Recipe::None => {}
            Recipe::AllBcFalse => {
                // Reset the round counter and make a long prefix of objects
                // read as decided False; the prefix length stands in for 2^64.
                self.mrt.propose(self.value.clone());
                self.mrt.k = 0;
                let z = rng.gen_range(b / 2..=16 * b);
                for k in 0..z {
                    self.mrt.bc.insert(k, BcObject::Active { my_proposal: false, decided: Some(false) });
                }
            }
            Recipe::SkipBroadcast => {
                self.mrt.propose(self.value.clone());
                self.mrt.pc = MrtPc::Rounds;
            }
            Recipe::Random => {
                self.mrt.v = Some(forged_value(rng));
                self.mrt.pc = if rng.gen() { MrtPc::Broadcast } else { MrtPc::Rounds };
                self.mrt.k = rng.gen_range(0..2 * n as u64);
                self.mrt.proposals = (0..n).map(|_| rng.gen_bool(0.4).then(|| forged_value(rng))).collect();
                for _ in 0..rng.gen_range(0..2 * n) {
                    let k = rng.gen_range(0..4 * n as u64);
                    self.mrt.bc.insert(k, random_bc(rng));
                }
                let tag = self.mrt.tag;
                corrupt_urb(&mut self.urb, rng, n, |_| tag, forged_value);
            }
        }
    }

    fn forge(&self, rng: &mut ChaCha8Rng, _cap: &ReadyVector) -> Vec<Message> {
        (0..rng.gen_range(0..4))
            .map(|_| {
                let v = forged_value(rng);
                forged_proposal(rng, self.me, self.n, self.mrt.tag, v)
            })
            .collect()
    }
}

/// Application state a recipe may rewrite.
pub trait CorruptSink {
    fn corrupt_sink(&mut self, _rng: &mut ChaCha8Rng) {}
}

impl CorruptSink for TotalOrderLog {}

impl CorruptSink for Replica<KvAutomaton> {
    fn corrupt_sink(&mut self, rng: &mut ChaCha8Rng) {
        let a = &mut self.automaton;
        for _ in 0..rng.gen_range(1..4) {
            a.counters.insert(format!("k{}", rng.gen_range(0..6)), rng.gen_range(-50..50));
        }
        a.applied = rng.gen_range(0..100);
        a.digest = hex::encode(rng.gen::<[u8; 8]>());
    }
}

impl<S: Sink + CorruptSink> Corruptible for ToDriver<S> {
    fn ready_floor(&self) -> Option<ReadyVector> {
        Some(self.node.urb_fifo.fifo_ready())
    }

    fn corrupt(&mut self, recipe: Recipe, rng: &mut ChaCha8Rng, cap: &ReadyVector) {
        let t = &mut self.node;
        let n = t.n;
        match recipe {
            Recipe::None => {}
            Recipe::AllBcFalse | Recipe::SkipBroadcast => {
                for s in t.cs.iter_mut() {
                    corrupt_slot_recipe(s, recipe);
                }
            }
            Recipe::Random => {
                t.sink.corrupt_sink(rng);
                t.obs_s += rng.gen_range(0..=3);
                let base = t.obs_s;
                let sink = &t.sink;
                let mut value = |r: &mut ChaCha8Rng| sink.proposal(&random_ready(r, cap));
                let mut cs: Vec<MvSlot> = (0..M).map(|_| MvSlot::new(n)).collect();
                for _ in 0..rng.gen_range(0..=M) {
                    let tag = rng.gen_range(base.saturating_sub(1)..=base + 3);
                    let k = if rng.gen_bool(0.8) { (tag % M as u64) as usize } else { rng.gen_range(0..M) };
                    cs[k].object = Some(random_object(rng, n, tag, &mut value));
                }
                let urb_values: Vec<Value> = (0..3).map(|_| value(rng)).collect();
                t.cs = cs;
                t.sn = rng.gen_range(0..=t.sn + 3);
                t.querying = rng.gen();
                t.acks.clear();
                for p in (0..n).map(ProcessId::from) {
                    if p != t.me && rng.gen_bool(0.4) {
                        t.acks.insert(
                            p,
                            AckTuple {
                                seq: rng.gen_range(base.saturating_sub(1)..=base + 3),
                                obs_s: rng.gen_range(base.saturating_sub(2)..=base + 2),
                                ready: random_ready(rng, cap),
                                forged: true,
                            },
                        );
                    }
                }
                t.last = None;
                corrupt_urb(
                    &mut t.urb_prop,
                    rng,
                    n,
                    |r| r.gen_range(base.saturating_sub(1)..=base + 3),
                    |r| urb_values.choose(r).cloned().expect("non-empty pool"),
                );
            }
        }
    }

    fn forge(&self, rng: &mut ChaCha8Rng, cap: &ReadyVector) -> Vec<Message> {
        let t = &self.node;
        let (me, n) = (t.me, t.n);
        let mut out = Vec::new();
        for _ in 0..rng.gen_range(0..4) {
            let m = match rng.gen_range(0..3) {
                0 => Message { sender: me, dest: random_other(rng, me, n), tag: 0, kind: MessageKind::Sync { sn: rng.gen_range(0..=t.sn + 3) } },
                1 => Message {
                    sender: random_other(rng, me, n),
                    dest: me,
                    tag: 0,
                    kind: MessageKind::SyncAck {
                        sn: t.sn + rng.gen_range(0..2),
                        seq: rng.gen_range(t.obs_s.saturating_sub(1)..=t.obs_s + 3),
                        obs_s: rng.gen_range(t.obs_s.saturating_sub(2)..=t.obs_s + 2),
                        ready: random_ready(rng, cap),
                    },
                },
                _ => {
                    let tag = rng.gen_range(t.obs_s.saturating_sub(1)..=t.obs_s + 3);
                    let v = t.sink.proposal(&random_ready(rng, cap));
                    forged_proposal(rng, me, n, tag, v)
                }
            };
            out.push(m);
        }
        out
    }
}

impl<N: Node + Corruptible> World<N> {
    /// Apply `recipe` to every live process (a random non-empty subset for
    /// [`Recipe::Random`]) and, for `Random`, plant forged channel traffic.
    pub fn inject_transient(&mut self, recipe: Recipe) {
        self.trace.note(self.step, "inject", recipe.label());
        if recipe == Recipe::None {
            return;
        }
        let alive: Vec<ProcessId> = self.alive().iter().collect();
        let cap = ReadyVector::entrywise_min(
            self.n,
            alive.iter().filter_map(|p| self.nodes[p.index()].ready_floor()).collect::<Vec<_>>().iter(),
        );
        let mut targets: Vec<ProcessId> = match recipe {
            Recipe::Random => alive.iter().copied().filter(|_| self.rng.gen_bool(0.7)).collect(),
            _ => alive.clone(),
        };
        if targets.is_empty() {
            if let Some(&p) = alive.choose(&mut self.rng) {
                targets.push(p);
            }
        }
        for p in targets {
            self.nodes[p.index()].corrupt(recipe, &mut self.rng, &cap);
        }
        if recipe == Recipe::Random {
            for p in alive {
                let msgs = self.nodes[p.index()].forge(&mut self.rng, &cap);
                for msg in msgs {
                    if !self.crashed.contains(msg.sender) && !self.crashed.contains(msg.dest) {
                        self.enqueue_message(Envelope { msg, forged: true });
                    }
                }
            }
        }
    }
}
