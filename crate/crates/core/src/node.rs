//! The contract between protocol nodes and the simulator.

use serde::Serialize;

use crate::bc::BcKey;
use crate::mv::MvEnv;
use crate::types::{ProcSet, ProcessId, Stream, Value};
use crate::urb::{Envelope, Outbox, TxDescriptor, UrbService};
use crate::types::UrbPayload;

/// A batch of binary proposals submitted in one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BcRequest {
    pub tag: u64,
    pub entries: Vec<(usize, bool)>,
}

/// Protocol-level trace events. Field order is part of the trace hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "ev")]
pub enum NodeEvent {
    UrbDeliver { stream: Stream, origin: u32, seq: u64, tag: u64 },
    MvBroadcast { tag: u64, seq: u64 },
    BcInvoke { tag: u64, indices: Vec<usize> },
    MvResult { tag: u64, result: String },
    ToBroadcast { seq: u64 },
    CsPropose { tag: u64 },
    ToDeliver { tag: u64, count: usize, transient_error: bool },
    RsmApply { tag: u64, state_hash: String },
    Scrub,
    ObsJump { from: u64, to: u64 },
}

/// Everything a node may do during one atomic step.
#[derive(Debug)]
pub struct StepCtx {
    pub me: ProcessId,
    pub n: usize,
    pub step: u64,
    pub trusted: ProcSet,
    pub out: Outbox,
    pub bc: Vec<BcRequest>,
    pub events: Vec<NodeEvent>,
    /// Set when the node completed one full do-forever iteration.
    pub iteration_done: bool,
}

impl StepCtx {
    pub fn new(me: ProcessId, n: usize, step: u64, trusted: ProcSet) -> Self {
        StepCtx {
            me,
            n,
            step,
            trusted,
            out: Outbox::default(),
            bc: Vec::new(),
            events: Vec::new(),
            iteration_done: false,
        }
    }
}

pub trait Node {
    fn activate(&mut self, ctx: &mut StepCtx);
    fn on_message(&mut self, env: Envelope, ctx: &mut StepCtx);
    fn on_bc_decide(&mut self, key: BcKey, value: bool, ctx: &mut StepCtx);
    /// Active but undecided binary objects in the local cache, with the local proposal.
    fn pending_bc(&self) -> Vec<(BcKey, bool)>;
}

/// [`MvEnv`] over a proposal-stream URB instance and the step context.
pub struct UrbEnv<'a> {
    pub urb: &'a mut UrbService,
    pub ctx: &'a mut StepCtx,
}

impl MvEnv for UrbEnv<'_> {
    fn urb_broadcast(&mut self, tag: u64, v: Value, forged: bool) -> TxDescriptor {
        let tx = self.urb.broadcast(tag, UrbPayload::Proposal(Some(v)), forged);
        self.ctx.events.push(NodeEvent::MvBroadcast { tag, seq: tx.seq });
        tx
    }

    fn has_terminated(&self, tx: &TxDescriptor) -> bool {
        self.urb.has_terminated(tx)
    }

    fn bin_propose(&mut self, tag: u64, entries: &[(usize, bool)]) {
        self.ctx.events.push(NodeEvent::BcInvoke { tag, indices: entries.iter().map(|e| e.0).collect() });
        self.ctx.bc.push(BcRequest { tag, entries: entries.to_vec() });
    }
}
