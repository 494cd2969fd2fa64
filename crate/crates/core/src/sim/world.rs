//! The discrete-event world: one global event queue, bounded lossy
//! channels, crash schedule, perfect failure detector and the binary
//! consensus ledger.

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bc::{BcKey, IdealBc};
use crate::node::{Node, NodeEvent, StepCtx};
use crate::sim::config::{FaultConfig, SimConfig};
use crate::sim::trace::Trace;
use crate::types::{MessageKind, ProcSet, ProcessId};
use crate::urb::Envelope;

#[derive(Clone, Debug)]
pub enum Event {
    Activate(ProcessId),
    Deliver { id: u64, env: Envelope },
    BcPropose { from: ProcessId, tag: u64, entries: Vec<(usize, bool)> },
    BcDecide { to: ProcessId, key: BcKey, value: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Activate,
    Deliver,
    Lost,
    BcPropose,
    BcDecide,
    Skipped,
}

/// What happened in one step, for scenario-specific accounting.
#[derive(Debug)]
pub struct StepReport {
    pub step: u64,
    pub pid: Option<ProcessId>,
    pub kind: StepKind,
    /// Binary consensus submissions made by the algorithm (not resubmissions).
    pub bc_requests: Vec<(u64, Vec<(usize, bool)>)>,
    pub iteration_done: bool,
    pub events: Vec<NodeEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: u64,
    pub activations: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub overflow_drops: u64,
    pub bc_invocations: u64,
    pub bc_resubmissions: u64,
    pub cycles: u64,
}

pub struct World<N> {
    pub n: usize,
    pub nodes: Vec<N>,
    pub crashed: ProcSet,
    crash_at: Vec<Option<u64>>,
    faults: FaultConfig,
    queue: VecDeque<Event>,
    channels: Vec<VecDeque<u64>>,
    forced: Vec<u64>,
    lost: HashSet<u64>,
    next_id: u64,
    pub ledger: IdealBc,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub metrics: Metrics,
    pub trace: Trace,
    cycle_done: ProcSet,
}

impl<N: Node> World<N> {
    pub fn new(cfg: &SimConfig, nodes: Vec<N>, capture_trace: bool) -> Self {
        let n = cfg.n;
        assert_eq!(nodes.len(), n);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<ProcessId> = (0..n).map(ProcessId::from).collect();
        order.shuffle(&mut rng);
        let mut crash_at = vec![None; n];
        for (&p, &s) in &cfg.faults.crashes {
            crash_at[p as usize] = Some(s);
        }
        World {
            n,
            nodes,
            crashed: ProcSet::EMPTY,
            crash_at,
            faults: cfg.faults.clone(),
            queue: order.into_iter().map(Event::Activate).collect(),
            channels: vec![VecDeque::new(); n * n],
            forced: vec![0; n * n],
            lost: HashSet::new(),
            next_id: 0,
            ledger: IdealBc::new(),
            rng,
            step: 0,
            metrics: Metrics::default(),
            trace: Trace::new(capture_trace),
            cycle_done: ProcSet::EMPTY,
        }
    }

    pub fn alive(&self) -> ProcSet {
        ProcSet(ProcSet::full(self.n).0 & !self.crashed.0)
    }

    pub fn is_correct(&self, p: ProcessId) -> bool {
        !self.crashed.contains(p) && self.crash_at[p.index()].is_none()
    }

    /// Processes that never crash in this run.
    pub fn correct(&self) -> ProcSet {
        (0..self.n).map(ProcessId::from).filter(|p| self.is_correct(*p)).collect()
    }

    /// Failure-detector output at the current step.
    pub fn trusted(&self) -> ProcSet {
        (0..self.n)
            .map(ProcessId::from)
            .filter(|p| match self.crash_at[p.index()] {
                Some(c) if self.crashed.contains(*p) => self.step < c.saturating_add(self.faults.fd_delay),
                _ => true,
            })
            .collect()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn in_transit(&self, from: ProcessId, to: ProcessId) -> usize {
        self.channels[from.index() * self.n + to.index()].len()
    }

    /// Live (not yet lost) message events in the queue.
    pub fn messages(&self) -> impl Iterator<Item = (u64, &Envelope)> {
        self.queue.iter().filter_map(move |e| match e {
            Event::Deliver { id, env } if !self.lost.contains(id) => Some((*id, env)),
            _ => None,
        })
    }

    /// Per process: the largest `sn` among in-flight `SYNC`s it sent and `SYNCACK`s addressed to it.
    pub fn max_sn_in_flight(&self) -> Vec<Option<u64>> {
        let mut out = vec![None; self.n];
        for (_, env) in self.messages() {
            let (p, sn) = match env.msg.kind {
                MessageKind::Sync { sn } => (env.msg.sender, sn),
                MessageKind::SyncAck { sn, .. } => (env.msg.dest, sn),
                _ => continue,
            };
            let slot = &mut out[p.index()];
            *slot = Some(slot.map_or(sn, |m: u64| m.max(sn)));
        }
        out
    }

    pub fn forged_in_flight(&self) -> usize {
        self.messages().filter(|(_, e)| e.forged).count()
    }

    fn insert_event(&mut self, e: Event, reorder: bool) {
        if reorder && !self.queue.is_empty() {
            let at = self.rng.gen_range(0..=self.queue.len());
            self.queue.insert(at, e);
        } else {
            self.queue.push_back(e);
        }
    }

    /// Put a message on its channel, subject to capacity only (no lottery).
    pub fn enqueue_message(&mut self, env: Envelope) {
        let ch = env.msg.sender.index() * self.n + env.msg.dest.index();
        if self.channels[ch].len() >= self.faults.channel_capacity {
            if let Some(old) = self.channels[ch].pop_front() {
                self.lost.insert(old);
                self.metrics.overflow_drops += 1;
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.channels[ch].push_back(id);
        let reorder = self.faults.reorder;
        self.insert_event(Event::Deliver { id, env }, reorder);
    }

    fn send(&mut self, env: Envelope) {
        self.metrics.messages_sent += 1;
        let (s, d) = (env.msg.sender.index(), env.msg.dest.index());
        if s >= self.n || d >= self.n {
            return;
        }
        let ch = s * self.n + d;
        let p = self.faults.drop_prob;
        let drop = if p >= 1.0 {
            self.forced[ch] += 1;
            !self.forced[ch].is_multiple_of(self.faults.forced_every.max(1))
        } else {
            p > 0.0 && self.rng.gen_bool(p)
        };
        if drop {
            self.metrics.dropped += 1;
            return;
        }
        let q = self.faults.dup_prob;
        if q > 0.0 && self.rng.gen_bool(q.min(1.0)) {
            self.metrics.duplicated += 1;
            self.enqueue_message(env.clone());
        }
        self.enqueue_message(env);
    }

    fn apply_crashes(&mut self) {
        for i in 0..self.n {
            let p = ProcessId::from(i);
            if let Some(c) = self.crash_at[i] {
                if c <= self.step && !self.crashed.contains(p) {
                    self.crashed.insert(p);
                    self.trace.note(self.step, "crash", &p.to_string());
                }
            }
        }
    }

    fn finish(&mut self, p: ProcessId, ctx: StepCtx, report: &mut StepReport) {
        for env in ctx.out.sends {
            self.send(env);
        }
        for req in ctx.bc {
            self.metrics.bc_invocations += 1;
            for &(i, _) in &req.entries {
                self.ledger.submit(p, BcKey { tag: req.tag, index: i as u64 });
            }
            report.bc_requests.push((req.tag, req.entries.clone()));
            let reorder = self.faults.reorder;
            self.insert_event(Event::BcPropose { from: p, tag: req.tag, entries: req.entries }, reorder);
        }
        for e in &ctx.events {
            self.trace.event(self.step, p.0, e);
        }
        report.events = ctx.events;
        if ctx.iteration_done {
            report.iteration_done = true;
            self.cycle_done.insert(p);
            if self.cycle_done.is_superset(self.alive()) {
                self.metrics.cycles += 1;
                self.cycle_done = ProcSet::EMPTY;
            }
        }
    }

    fn resubmit(&mut self, p: ProcessId) {
        let pending = self.nodes[p.index()].pending_bc();
        for (key, b) in pending {
            if !self.ledger.is_inflight(p, key) {
                self.ledger.submit(p, key);
                self.metrics.bc_resubmissions += 1;
                let reorder = self.faults.reorder;
                self.insert_event(Event::BcPropose { from: p, tag: key.tag, entries: vec![(key.index as usize, b)] }, reorder);
            }
        }
    }

    /// Execute one event. Returns `None` when nothing is left to do.
    pub fn step(&mut self) -> Option<StepReport> {
        self.apply_crashes();
        let ev = self.queue.pop_front()?;
        let mut report = StepReport {
            step: self.step,
            pid: None,
            kind: StepKind::Skipped,
            bc_requests: Vec::new(),
            iteration_done: false,
            events: Vec::new(),
        };
        let trusted = self.trusted();
        match ev {
            Event::Activate(p) => {
                if !self.crashed.contains(p) {
                    report.pid = Some(p);
                    report.kind = StepKind::Activate;
                    self.metrics.activations += 1;
                    self.trace.step(self.step, "act", Some(p.0), None);
                    let mut ctx = StepCtx::new(p, self.n, self.step, trusted);
                    self.nodes[p.index()].activate(&mut ctx);
                    self.finish(p, ctx, &mut report);
                    self.resubmit(p);
                    self.queue.push_back(Event::Activate(p));
                }
            }
            Event::Deliver { id, env } => {
                let ch = env.msg.sender.index() * self.n + env.msg.dest.index();
                if self.lost.remove(&id) {
                    report.kind = StepKind::Lost;
                } else {
                    if let Some(pos) = self.channels[ch].iter().position(|x| *x == id) {
                        self.channels[ch].remove(pos);
                    }
                    let p = env.msg.dest;
                    if !self.crashed.contains(p) {
                        report.pid = Some(p);
                        report.kind = StepKind::Deliver;
                        self.metrics.messages_delivered += 1;
                        self.trace.step(self.step, "msg", Some(p.0), Some(env.msg.sender.0));
                        let mut ctx = StepCtx::new(p, self.n, self.step, trusted);
                        self.nodes[p.index()].on_message(env, &mut ctx);
                        self.finish(p, ctx, &mut report);
                    }
                }
            }
            Event::BcPropose { from, tag, entries } => {
                report.kind = StepKind::BcPropose;
                self.trace.step(self.step, "bcp", Some(from.0), None);
                for (i, b) in entries {
                    let key = BcKey { tag, index: i as u64 };
                    let value = self.ledger.process(key, b);
                    let reorder = self.faults.reorder;
                    self.insert_event(Event::BcDecide { to: from, key, value }, reorder);
                }
            }
            Event::BcDecide { to, key, value } => {
                self.ledger.complete(to, key);
                if !self.crashed.contains(to) {
                    report.pid = Some(to);
                    report.kind = StepKind::BcDecide;
                    self.trace.step(self.step, "bcd", Some(to.0), None);
                    let mut ctx = StepCtx::new(to, self.n, self.step, trusted);
                    self.nodes[to.index()].on_bc_decide(key, value, &mut ctx);
                    self.finish(to, ctx, &mut report);
                }
            }
        }
        self.step += 1;
        self.metrics.steps = self.step;
        Some(report)
    }
}
