//! Scenario runners: build a world from a config, drive it to quiescence or
//! budget, and evaluate the registered predicates.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::invariants::{
    check_agreement, check_integrity, check_pred, check_suffix_order, check_termination, check_total_order,
    check_validity, def2_consistent, def4_seq_window, def4_slots, def4_sn, Verdict,
};
use crate::mv::Variant;
use crate::node::NodeEvent;
use crate::rsm::{Automaton, KvAutomaton, Replica};
use crate::sim::config::{ConfigError, ScenarioKind, SimConfig};
use crate::sim::faults::{CorruptSink, Recipe};
use crate::sim::nodes::{MrtNode, MvNode, ToDriver};
use crate::sim::report::RunReport;
use crate::sim::world::World;
use crate::to_urb::{Delivered, Sink, ToUrbNode, TotalOrderLog};
use crate::types::{ConsensusResult, ProcessId, Value};

/// Steps kept running after every correct process settled, to catch late flips.
pub const MV_TAIL: u64 = 400;
pub const MV_TAIL_CYCLES: u64 = 4;

/// Cycle bound on reaching legality after an injection.
pub const LEGALITY_CYCLES: u64 = 6;

/// Cycle bound on quiescence after the last broadcast.
pub const QUIESCENCE_CYCLES: u64 = 3;

/// Workload and proposal-timing randomness, kept apart from the world's stream.
fn aux_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5eed)
}

fn inject_due<N>(w: &mut World<N>, cfg: &SimConfig, injected: &mut Option<u64>)
where
    N: crate::node::Node + crate::sim::faults::Corruptible,
{
    if let Some(t) = &cfg.faults.transient {
        if injected.is_none() && w.step >= t.at_step {
            w.inject_transient(t.recipe);
            *injected = Some(w.step);
        }
    }
}

fn injects(cfg: &SimConfig) -> bool {
    cfg.faults.transient.as_ref().is_some_and(|t| t.recipe != Recipe::None)
}

pub struct MvRun {
    pub report: RunReport,
    pub results: Vec<(ProcessId, ConsensusResult)>,
    pub trace: Option<Vec<String>>,
}

/// A single multivalued consensus instance. Without injection the
/// consensus properties are checked; with one, convergence is.
pub fn run_mv(cfg: &SimConfig, capture: bool) -> Result<MvRun, ConfigError> {
    cfg.validate()?;
    let n = cfg.n;
    let mut aux = aux_rng(cfg.seed);
    let nodes = (0..n)
        .map(|i| {
            let at = aux.gen_range(0..4 * n as u64);
            MvNode::new(ProcessId::from(i), n, cfg.variant, Value::from_string(format!("v{i}")), at)
        })
        .collect();
    let mut w = World::new(cfg, nodes, capture);
    let corrupting = injects(cfg);
    let correct = w.correct();
    let mut injected = None;
    // (step, cycle count) since which every correct process has been settled.
    let mut settled: Option<(u64, u64)> = None;
    loop {
        inject_due(&mut w, cfg, &mut injected);
        let stable = settled.is_some_and(|(s, c)| w.step >= s + MV_TAIL && w.metrics.cycles >= c + MV_TAIL_CYCLES);
        if w.step >= cfg.budget || stable {
            break;
        }
        if w.step().is_none() {
            break;
        }
        if injected.is_some() || !corrupting {
            let done = correct.iter().all(|p| {
                let r = w.nodes[p.index()].result();
                if corrupting { !r.is_bot() } else { r.decided().is_some() }
            });
            settled = match (done, settled) {
                (false, _) => None,
                (true, None) => Some((w.step, w.metrics.cycles)),
                (true, s) => s,
            };
        }
    }
    let settled = settled.map(|(s, _)| s);

    let results: Vec<(ProcessId, ConsensusResult)> = correct.iter().map(|p| (p, w.nodes[p.index()].result())).collect();
    let mut report = RunReport::new(cfg.clone(), w.metrics.clone(), w.trace.hash());
    let max_bc = w.nodes.iter().flat_map(|x| x.bc_calls.values().map(Vec::len)).max().unwrap_or(0);
    let max_steps = w.nodes.iter().map(|x| x.invoke_steps).max().unwrap_or(0);
    report.stat("max_bc_per_object", max_bc);
    report.stat("max_invoke_steps", max_steps);
    report.stat("settled_step", settled);
    report.stat("transient_errors", results.iter().filter(|r| r.1 == ConsensusResult::TransientError).count());

    if corrupting {
        let bot = results.iter().find(|(_, r)| r.is_bot());
        report.verdicts.push(match bot {
            Some((p, _)) => Verdict::fail("leaves_bot", format!("{p} still reports Bot")),
            None => Verdict::ok("leaves_bot"),
        });
        let bad = correct.iter().find(|p| {
            let x = &w.nodes[p.index()];
            !(def2_consistent(&x.slot) || x.result() == ConsensusResult::TransientError)
        });
        report.verdicts.push(match bad {
            Some(p) => Verdict::fail("def2_or_error", format!("{p}: {:?}", w.nodes[p.index()].slot.object)),
            None => Verdict::ok("def2_or_error"),
        });
    } else {
        let decisions: Vec<(ProcessId, Value)> = w
            .nodes
            .iter()
            .flat_map(|x| x.history.iter().filter_map(move |r| r.decided().map(|v| (x.me, v.clone()))))
            .collect();
        let proposed: BTreeSet<Value> = w.nodes.iter().filter(|x| x.proposed).map(|x| x.value.clone()).collect();
        report.verdicts.push(Verdict::from_check("agreement", check_agreement(&decisions)));
        report.verdicts.push(Verdict::from_check("validity", check_validity(&decisions, &proposed)));
        let integrity = w
            .nodes
            .iter()
            .try_for_each(|x| check_integrity(&x.history, true).map_err(|e| format!("{}: {e}", x.me)));
        report.verdicts.push(Verdict::from_check("integrity", integrity));
        report.verdicts.push(Verdict::from_check("termination", check_termination(&results)));
        let over = w.nodes.iter().find_map(|x| {
            x.bc_calls.iter().find_map(|(tag, idx)| {
                let distinct: BTreeSet<usize> = idx.iter().copied().collect();
                (idx.len() > n || distinct.len() != idx.len())
                    .then(|| format!("{} invoked {:?} on object {tag}", x.me, idx))
            })
        });
        report.verdicts.push(match over {
            Some(w) => Verdict::fail("bc_bound", w),
            None => Verdict::ok("bc_bound"),
        });
        if cfg.variant == Variant::Concurrent {
            let multi = w.nodes.iter().find(|x| x.invoke_steps > 1);
            report.verdicts.push(match multi {
                Some(x) => Verdict::fail("single_step", format!("{} invoked in {} steps", x.me, x.invoke_steps)),
                None => Verdict::ok("single_step"),
            });
        }
    }
    if settled.is_none() {
        report.verdicts.push(Verdict::fail("budget", format!("not settled within {} steps", cfg.budget)));
    }
    let trace = w.trace.lines().map(<[String]>::to_vec);
    Ok(MvRun { report, results, trace })
}

pub struct MrtRun {
    pub report: RunReport,
    pub liveness_failure: bool,
    pub trace: Option<Vec<String>>,
}

/// The baseline. It fails liveness when a correct process has not returned
/// within the round budget.
pub fn run_mrt(cfg: &SimConfig, capture: bool) -> Result<MrtRun, ConfigError> {
    cfg.validate()?;
    let n = cfg.n;
    let b = cfg.mrt_round_budget();
    let nodes = (0..n).map(|i| MrtNode::new(ProcessId::from(i), n, Value::from_string(format!("v{i}")), b)).collect();
    let mut w = World::new(cfg, nodes, capture);
    let correct = w.correct();
    let mut injected = None;
    let mut exhausted: Option<ProcessId> = None;
    let mut all_returned = false;
    loop {
        inject_due(&mut w, cfg, &mut injected);
        if w.step >= cfg.budget || w.step().is_none() {
            break;
        }
        all_returned = correct.iter().all(|p| w.nodes[p.index()].mrt.returned().is_some());
        exhausted = correct.iter().find(|p| {
            let x = &w.nodes[p.index()];
            x.mrt.returned().is_none() && x.rounds >= b
        });
        if all_returned || exhausted.is_some() {
            break;
        }
    }
    let mut report = RunReport::new(cfg.clone(), w.metrics.clone(), w.trace.hash());
    let max_rounds = w.nodes.iter().map(|x| x.rounds).max().unwrap_or(0);
    report.stat("round_budget", b);
    report.stat("max_rounds", max_rounds);
    let liveness_failure = !all_returned;
    report.verdicts.push(if all_returned {
        Verdict::ok("liveness")
    } else if let Some(p) = exhausted {
        Verdict::fail("liveness", format!("{p} ran {b} rounds without returning"))
    } else {
        Verdict::fail("liveness", format!("step budget {} exhausted", cfg.budget))
    });
    if !injects(cfg) {
        let decisions: Vec<(ProcessId, Value)> =
            w.nodes.iter().filter_map(|x| x.mrt.returned().map(|v| (x.me, v.clone()))).collect();
        report.verdicts.push(Verdict::from_check("agreement", check_agreement(&decisions)));
    }
    let trace = w.trace.lines().map(<[String]>::to_vec);
    Ok(MrtRun { report, liveness_failure, trace })
}

/// Delivery record of a total-order sink.
pub trait Observed {
    fn entries(&self) -> &[Delivered];
    fn snapshot(&self) -> Option<Vec<u8>> {
        None
    }
}

impl Observed for TotalOrderLog {
    fn entries(&self) -> &[Delivered] {
        &self.log
    }
}

impl<A: Automaton> Observed for Replica<A> {
    fn entries(&self) -> &[Delivered] {
        &self.applied
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(self.automaton.get_state())
    }
}

pub struct ToRun {
    pub report: RunReport,
    /// First step from which every legality predicate held to the end.
    pub legality_step: u64,
    pub injected_at: Option<u64>,
    /// Cycle boundaries between the injection and the legality point.
    pub cycles_to_legality: Option<u64>,
    /// Cycle boundaries between the last broadcast and the point from which pred persisted.
    pub quiescence_cycles: Option<u64>,
    pub snapshots: Vec<(ProcessId, Vec<u8>)>,
    pub trace: Option<Vec<String>>,
}

fn workload(cfg: &SimConfig) -> Vec<Vec<(u64, Value)>> {
    let mut aux = aux_rng(cfg.seed);
    let mut per = vec![Vec::new(); cfg.n];
    for m in 0..cfg.workload.messages {
        let p = aux.gen_range(0..cfg.n);
        let at = aux.gen_range(0..cfg.workload.window.max(1));
        let cmd = format!("k{}+{}", m % 5, aux.gen_range(1..10));
        per[p].push((at, Value::from_string(cmd)));
    }
    for s in per.iter_mut() {
        s.sort_by_key(|e| e.0);
    }
    per
}

fn count_between(marks: &[u64], lo: u64, hi: u64) -> u64 {
    marks.iter().filter(|&&c| lo <= c && c < hi).count() as u64
}

/// Total-order broadcast, or replication when the sink is a replica.
pub fn run_total_order<S>(cfg: &SimConfig, capture: bool, sink: impl Fn(ProcessId) -> S) -> Result<ToRun, ConfigError>
where
    S: Sink + CorruptSink + Observed,
{
    cfg.validate()?;
    let n = cfg.n;
    let nodes: Vec<ToDriver<S>> = workload(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, sched)| {
            let p = ProcessId::from(i);
            ToDriver::new(ToUrbNode::new(p, n, cfg.delta, cfg.variant, sink(p)), sched)
        })
        .collect();
    let mut w = World::new(cfg, nodes, capture);
    let correct = w.correct();
    let corrupting = injects(cfg);
    let mut injected = None;
    let mut delivery_steps: Vec<Vec<u64>> = vec![Vec::new(); n];
    let mut cycle_marks: Vec<u64> = Vec::new();
    let mut last_bad: Option<u64> = None;
    let mut last_crowded: Option<u64> = None;
    let mut last_pred_false: Option<u64> = None;
    let mut transient_errors = 0u64;
    let mut stop_at: Option<u64> = None;
    let mut ready_total = 0u64;
    let mut last_ready_step = 0u64;
    let mut first_bad_witness: Option<String> = None;
    let mut last_violation: Option<String> = None;
    // Last step at which an object built from injected state was still undecided somewhere.
    let mut last_tainted: Option<u64> = None;
    loop {
        inject_due(&mut w, cfg, &mut injected);
        if w.step >= cfg.budget || stop_at.is_some_and(|s| w.step >= s) {
            break;
        }
        let cycles_before = w.metrics.cycles;
        let Some(rep) = w.step() else { break };
        if w.metrics.cycles > cycles_before {
            cycle_marks.push(rep.step);
        }
        if let Some(p) = rep.pid {
            let len = w.nodes[p.index()].node.sink.entries().len();
            let steps = &mut delivery_steps[p.index()];
            while steps.len() < len {
                steps.push(rep.step);
            }
        }
        transient_errors += rep
            .events
            .iter()
            .filter(|e| matches!(e, NodeEvent::ToDeliver { transient_error: true, .. }))
            .count() as u64;

        let in_flight = w.max_sn_in_flight();
        let mut bad = None;
        let mut crowded = false;
        for p in correct.iter() {
            let t = &w.nodes[p.index()].node;
            let r = def4_slots(t)
                .and_then(|_| def4_seq_window(t))
                .and_then(|_| def4_sn(t.sn, p, in_flight[p.index()]));
            if let Err(e) = r {
                bad = Some(e);
            }
            if t.cs.iter().filter_map(|s| s.object.as_ref()).any(|o| o.forged && o.tag > t.obs_s) {
                last_tainted = Some(rep.step);
            }
            crowded |= t.active_slots() > 2;
        }
        if let Some(e) = bad {
            if !corrupting && first_bad_witness.is_none() {
                first_bad_witness = Some(format!("step {}: {e}", rep.step));
            }
            last_bad = Some(rep.step);
            last_violation = Some(e.clone());
        }
        if crowded {
            last_crowded = Some(rep.step);
        }
        let ready: u64 = correct.iter().map(|p| w.nodes[p.index()].node.urb_fifo.fifo_ready().0.iter().sum::<u64>()).sum();
        if ready != ready_total {
            ready_total = ready;
            last_ready_step = rep.step;
        }
        let pred = check_pred(correct.iter().map(|p| &w.nodes[p.index()].node));
        if !pred {
            last_pred_false = Some(rep.step);
        }
        if stop_at.is_none() && pred && rep.step >= cfg.workload.window && injected.is_some() == corrupting {
            let drained = correct.iter().all(|p| w.nodes[p.index()].schedule.is_empty());
            if drained && undelivered(&w, correct).is_none() {
                stop_at = Some(rep.step + cfg.workload.tail);
            }
        }
    }

    let end = w.step;
    // Corrupted state can satisfy the predicates by accident, so the legal
    // suffix never starts before every process has finished one iteration
    // after the injection.
    let first_cycle = injected.map_or(0, |i| cycle_marks.iter().copied().find(|&c| c >= i).map_or(end, |c| c + 1));
    let legality = last_bad.map_or(0, |s| s + 1).max(first_cycle);
    let mut report = RunReport::new(cfg.clone(), w.metrics.clone(), w.trace.hash());
    report.verdicts.push(if stop_at.is_some() {
        Verdict::ok("quiescent")
    } else {
        Verdict::fail("quiescent", format!("no quiescence within {} steps", cfg.budget))
    });
    report.verdicts.push(Verdict::from_check(
        "termination",
        match undelivered(&w, correct) {
            Some(x) => Err(x),
            None => Ok(()),
        },
    ));
    report.verdicts.push(if legality < end {
        Verdict::ok("legal")
    } else {
        Verdict::fail("legal", "invariants still violated at the end of the run")
    });
    if !corrupting {
        report.verdicts.push(match first_bad_witness {
            Some(x) => Verdict::fail("def4_every_step", x),
            None => Verdict::ok("def4_every_step"),
        });
        report.verdicts.push(if transient_errors == 0 {
            Verdict::ok("no_transient_error")
        } else {
            Verdict::fail("no_transient_error", format!("{transient_errors} slot results were the error symbol"))
        });
        let logs: Vec<(ProcessId, &[Delivered])> =
            w.nodes.iter().map(|x| (x.node.me, x.node.sink.entries())).collect();
        report.verdicts.push(Verdict::from_check("total_order", check_total_order(&logs)));
    } else {
        // Messages already in flight when the state was corrupted may sit in
        // different batches at different processes; order is owed to the rest.
        let fresh: BTreeSet<(ProcessId, u64)> = w
            .nodes
            .iter()
            .flat_map(|x| x.broadcasts.iter().filter(|b| b.1 >= legality).map(move |b| (x.node.me, b.0)))
            .collect();
        let logs: Vec<(ProcessId, Vec<Delivered>)> = correct
            .iter()
            .map(|p| {
                let entries = w.nodes[p.index()].node.sink.entries();
                (p, entries.iter().filter(|d| fresh.contains(&(d.origin, d.seq))).cloned().collect())
            })
            .collect();
        let logs: Vec<(ProcessId, &[Delivered])> = logs.iter().map(|(p, l)| (*p, l.as_slice())).collect();
        report.verdicts.push(Verdict::from_check("total_order", check_suffix_order(&logs)));
        report.stat("fresh_messages", fresh.len());
    }
    report.verdicts.push(match last_crowded {
        Some(s) if s >= legality => Verdict::fail("two_slots", format!("three active slots at step {s}")),
        _ => Verdict::ok("two_slots"),
    });

    let cycles_to_legality = injected.map(|i| count_between(&cycle_marks, i, legality.max(i)));
    if let (true, Some(c)) = (corrupting, cycles_to_legality) {
        report.verdicts.push(if c <= LEGALITY_CYCLES {
            Verdict::ok("legality_cycles")
        } else {
            Verdict::fail("legality_cycles", format!("{c} cycles after injection"))
        });
    }

    let cutoff = w.nodes.iter().filter_map(|x| x.last_broadcast_step).max().unwrap_or(0);
    let pred_from = last_pred_false.map_or(0, |s| s + 1);
    let quiescence_cycles = (pred_from < end).then(|| count_between(&cycle_marks, cutoff, pred_from.max(cutoff)));
    if !corrupting {
        report.verdicts.push(match quiescence_cycles {
            Some(c) if c <= QUIESCENCE_CYCLES => Verdict::ok("quiescence"),
            Some(c) => Verdict::fail("quiescence", format!("pred settled {c} cycles after the last broadcast")),
            None => Verdict::fail("quiescence", "pred does not hold at the end"),
        });
    }

    let snapshots: Vec<(ProcessId, Vec<u8>)> =
        correct.iter().filter_map(|p| w.nodes[p.index()].node.sink.snapshot().map(|s| (p, s))).collect();
    if let Some((p0, s0)) = snapshots.first() {
        let diff = snapshots.iter().find(|(_, s)| s != s0);
        report.verdicts.push(match diff {
            Some((p, _)) => Verdict::fail("snapshots_identical", format!("{p0} and {p} differ")),
            None => Verdict::ok("snapshots_identical"),
        });
    }

    report.stat("legality_step", legality);
    report.stat("last_violation", last_violation);
    report.stat("cycles_to_untainted", injected.map(|i| count_between(&cycle_marks, i, last_tainted.map_or(i, |s| (s + 1).max(i)))));
    report.stat("injected_at", injected);
    report.stat("cycles_to_legality", cycles_to_legality);
    report.stat("quiescence_cycles", quiescence_cycles);
    report.stat("cycles_after_last_ready", count_between(&cycle_marks, last_ready_step, pred_from.max(last_ready_step)));
    let last_delivery = delivery_steps.iter().flatten().copied().max().unwrap_or(0);
    report.stat("cycles_after_last_delivery", count_between(&cycle_marks, last_delivery, pred_from.max(last_delivery)));
    report.stat("transient_errors", transient_errors);
    report.stat("delivered", correct.iter().map(|p| w.nodes[p.index()].node.sink.entries().len()).max().unwrap_or(0));
    let trace = w.trace.lines().map(<[String]>::to_vec);
    Ok(ToRun {
        report,
        legality_step: legality,
        injected_at: injected,
        cycles_to_legality,
        quiescence_cycles,
        snapshots,
        trace,
    })
}

/// First message from a correct broadcaster some correct process lacks.
fn undelivered<S: Sink + Observed>(w: &World<ToDriver<S>>, correct: crate::types::ProcSet) -> Option<String> {
    let have: BTreeMap<ProcessId, BTreeSet<(ProcessId, u64)>> = correct
        .iter()
        .map(|p| (p, w.nodes[p.index()].node.sink.entries().iter().map(|d| (d.origin, d.seq)).collect()))
        .collect();
    for q in correct.iter() {
        for &(seq, _) in &w.nodes[q.index()].broadcasts {
            if let Some((p, _)) = have.iter().find(|(_, s)| !s.contains(&(q, seq))) {
                return Some(format!("{p} never delivered {q}#{seq}"));
            }
        }
    }
    None
}

pub fn run_to_urb(cfg: &SimConfig, capture: bool) -> Result<ToRun, ConfigError> {
    run_total_order(cfg, capture, |_| TotalOrderLog::default())
}

pub fn run_rsm(cfg: &SimConfig, capture: bool) -> Result<ToRun, ConfigError> {
    run_total_order(cfg, capture, |_| Replica::new(KvAutomaton::default()))
}

/// Any scenario, reduced to its report and optional trace.
pub struct Outcome {
    pub report: RunReport,
    pub trace: Option<Vec<String>>,
}

pub fn run(cfg: &SimConfig, capture: bool) -> Result<Outcome, ConfigError> {
    Ok(match cfg.scenario {
        ScenarioKind::Mv => {
            let r = run_mv(cfg, capture)?;
            Outcome { report: r.report, trace: r.trace }
        }
        ScenarioKind::Mrt => {
            let r = run_mrt(cfg, capture)?;
            Outcome { report: r.report, trace: r.trace }
        }
        ScenarioKind::ToUrb => {
            let r = run_to_urb(cfg, capture)?;
            Outcome { report: r.report, trace: r.trace }
        }
        ScenarioKind::Rsm => {
            let r = run_rsm(cfg, capture)?;
            Outcome { report: r.report, trace: r.trace }
        }
    })
}
