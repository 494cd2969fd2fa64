//! Per-process drivers the simulator schedules: a single multivalued
//! consensus instance, the baseline, and the total-order layer with an
//! application workload.

use std::collections::{BTreeMap, VecDeque};

use crate::bc::{BcKey, BcObject};
use crate::mrt::MrtState;
use crate::mv::{MvSlot, Variant};
use crate::node::{Node, NodeEvent, StepCtx, UrbEnv};
use crate::to_urb::{Sink, ToUrbNode};
use crate::types::{result_label, ConsensusResult, MessageKind, ProcessId, Stream, UrbPayload, Value};
use crate::urb::{Delivery, Envelope, UrbService};

/// Feed proposal-stream traffic to a URB instance and return what became deliverable.
fn urb_message(urb: &mut UrbService, env: Envelope, ctx: &mut StepCtx) -> Vec<Delivery> {
    let Envelope { msg, forged } = env;
    match msg.kind {
        MessageKind::UrbData { origin, seq, payload } if payload.stream() == Stream::Proposal => {
            urb.on_data(msg.sender, msg.tag, origin, seq, payload, forged, &mut ctx.out);
        }
        MessageKind::UrbAck { stream: Stream::Proposal, origin, seq, delivered } => {
            urb.on_ack(msg.sender, origin, seq, delivered);
        }
        _ => return Vec::new(),
    }
    urb.deliver_ready()
}

fn log_deliveries(ds: &[Delivery], ctx: &mut StepCtx) {
    for d in ds {
        ctx.events.push(NodeEvent::UrbDeliver { stream: Stream::Proposal, origin: d.origin.0, seq: d.seq, tag: d.tag });
    }
}

/// One multivalued consensus object plus its proposal stream.
#[derive(Clone, Debug)]
pub struct MvNode {
    pub me: ProcessId,
    pub n: usize,
    pub tag: u64,
    pub slot: MvSlot,
    pub urb: UrbService,
    pub variant: Variant,
    pub value: Value,
    /// First step at which the node calls `propose`.
    pub propose_at: u64,
    pub proposed: bool,
    /// Distinct consecutive `result()` observations.
    pub history: Vec<ConsensusResult>,
    /// Indices handed to `binPropose`, per object tag.
    pub bc_calls: BTreeMap<u64, Vec<usize>>,
    /// Steps in which at least one `binPropose` happened.
    pub invoke_steps: u64,
}

impl MvNode {
    pub fn new(me: ProcessId, n: usize, variant: Variant, value: Value, propose_at: u64) -> Self {
        MvNode {
            me,
            n,
            tag: 0,
            slot: MvSlot::new(n),
            urb: UrbService::new(me, n, Stream::Proposal),
            variant,
            value,
            propose_at,
            proposed: false,
            history: Vec::new(),
            bc_calls: BTreeMap::new(),
            invoke_steps: 0,
        }
    }

    pub fn result(&self) -> ConsensusResult {
        self.slot.result()
    }

    fn observe(&mut self, ctx: &mut StepCtx) {
        let r = self.slot.result();
        if self.history.last() != Some(&r) {
            ctx.events.push(NodeEvent::MvResult { tag: self.tag, result: result_label(&r).to_owned() });
            self.history.push(r);
        }
    }

    fn deliver(&mut self, ds: Vec<Delivery>) {
        for d in ds {
            if let UrbPayload::Proposal(v) = d.payload {
                self.slot.on_proposal(d.tag, d.origin, v, d.forged);
            }
        }
    }
}

impl Node for MvNode {
    fn activate(&mut self, ctx: &mut StepCtx) {
        self.urb.set_trusted(ctx.trusted);
        let ds = self.urb.activate(&mut ctx.out);
        log_deliveries(&ds, ctx);
        self.deliver(ds);
        if !self.proposed && ctx.step >= self.propose_at {
            self.slot.propose(self.tag, self.value.clone());
            self.proposed = true;
        }
        let tag = self.slot.tag();
        let fx = {
            let mut env = UrbEnv { urb: &mut self.urb, ctx };
            self.slot.do_forever(&mut env, self.variant)
        };
        if !fx.proposed.is_empty() {
            self.invoke_steps += 1;
            self.bc_calls.entry(tag.unwrap_or(self.tag)).or_default().extend(fx.proposed);
        }
        self.observe(ctx);
        ctx.iteration_done = true;
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut StepCtx) {
        let ds = urb_message(&mut self.urb, env, ctx);
        log_deliveries(&ds, ctx);
        self.deliver(ds);
    }

    fn on_bc_decide(&mut self, key: BcKey, value: bool, _ctx: &mut StepCtx) {
        self.slot.on_bc_decide(key.tag, key.index as usize, value);
    }

    fn pending_bc(&self) -> Vec<(BcKey, bool)> {
        let Some(o) = &self.slot.object else { return Vec::new() };
        o.bc.iter()
            .enumerate()
            .filter_map(|(i, b)| match b {
                BcObject::Active { my_proposal, decided: None } => Some((BcKey { tag: o.tag, index: i as u64 }, *my_proposal)),
                _ => None,
            })
            .collect()
    }
}

/// The baseline reduction at one process.
#[derive(Clone, Debug)]
pub struct MrtNode {
    pub me: ProcessId,
    pub n: usize,
    pub mrt: MrtState,
    pub urb: UrbService,
    pub value: Value,
    pub proposed: bool,
    /// Rounds executed (each increment of the round counter).
    pub rounds: u64,
    pub round_budget: u64,
}

impl MrtNode {
    pub fn new(me: ProcessId, n: usize, value: Value, round_budget: u64) -> Self {
        MrtNode {
            me,
            n,
            mrt: MrtState::new(n, 0),
            urb: UrbService::new(me, n, Stream::Proposal),
            value,
            proposed: false,
            rounds: 0,
            round_budget,
        }
    }

    fn deliver(&mut self, ds: Vec<Delivery>) {
        for d in ds {
            if let UrbPayload::Proposal(v) = d.payload {
                if d.tag == self.mrt.tag {
                    self.mrt.on_proposal(d.origin, v);
                }
            }
        }
    }
}

impl Node for MrtNode {
    fn activate(&mut self, ctx: &mut StepCtx) {
        self.urb.set_trusted(ctx.trusted);
        let ds = self.urb.activate(&mut ctx.out);
        log_deliveries(&ds, ctx);
        self.deliver(ds);
        if !self.proposed {
            self.mrt.propose(self.value.clone());
            self.proposed = true;
        }
        let (k0, done) = (self.mrt.k, self.mrt.returned().is_some());
        {
            let mut env = UrbEnv { urb: &mut self.urb, ctx };
            self.mrt.step(&mut env);
        }
        self.rounds += self.mrt.k.saturating_sub(k0);
        if !done {
            if let Some(v) = self.mrt.returned() {
                let r = ConsensusResult::Decided(v.clone());
                ctx.events.push(NodeEvent::MvResult { tag: self.mrt.tag, result: result_label(&r).to_owned() });
            }
        }
        ctx.iteration_done = true;
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut StepCtx) {
        let ds = urb_message(&mut self.urb, env, ctx);
        log_deliveries(&ds, ctx);
        self.deliver(ds);
    }

    fn on_bc_decide(&mut self, key: BcKey, value: bool, _ctx: &mut StepCtx) {
        self.mrt.on_bc_decide(key.tag, key.index, value);
    }

    fn pending_bc(&self) -> Vec<(BcKey, bool)> {
        self.mrt
            .bc
            .iter()
            .filter_map(|(&k, b)| match b {
                BcObject::Active { my_proposal, decided: None } => Some((BcKey { tag: self.mrt.tag, index: k }, *my_proposal)),
                _ => None,
            })
            .collect()
    }
}

/// Total-order node plus the application broadcasts it is scheduled to make.
#[derive(Clone, Debug)]
pub struct ToDriver<S> {
    pub node: ToUrbNode<S>,
    /// `(step, message)` pairs, ascending by step.
    pub schedule: VecDeque<(u64, Value)>,
    /// `(seq, step)` of every broadcast made so far.
    pub broadcasts: Vec<(u64, u64)>,
    pub last_broadcast_step: Option<u64>,
}

impl<S: Sink> ToDriver<S> {
    pub fn new(node: ToUrbNode<S>, schedule: Vec<(u64, Value)>) -> Self {
        ToDriver { node, schedule: schedule.into(), broadcasts: Vec::new(), last_broadcast_step: None }
    }
}

impl<S: Sink> Node for ToDriver<S> {
    fn activate(&mut self, ctx: &mut StepCtx) {
        while self.schedule.front().is_some_and(|(s, _)| *s <= ctx.step) {
            let (_, m) = self.schedule.pop_front().expect("front exists");
            self.node.to_broadcast(m, ctx);
            self.broadcasts.push((self.node.urb_fifo.next_seq(), ctx.step));
            self.last_broadcast_step = Some(ctx.step);
        }
        self.node.activate(ctx);
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut StepCtx) {
        self.node.on_message(env, ctx);
    }

    fn on_bc_decide(&mut self, key: BcKey, value: bool, ctx: &mut StepCtx) {
        self.node.on_bc_decide(key, value, ctx);
    }

    fn pending_bc(&self) -> Vec<(BcKey, bool)> {
        self.node.pending_bc()
    }
}
