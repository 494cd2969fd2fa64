//! Pure predicates over protocol state and run histories. Shared by the
//! scenario runners, the CLI verdict engine and the tests.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::bc::BcObject;
use crate::mv::MvSlot;
use crate::to_urb::{Delivered, Sink, ToUrbNode, M};
use crate::types::{ConsensusResult, ProcessId, Value};

/// Outcome of one predicate; `witness` explains the first violation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

impl Verdict {
    pub fn ok(name: &str) -> Self {
        Verdict { name: name.into(), pass: true, witness: None }
    }

    pub fn fail(name: &str, witness: impl Into<String>) -> Self {
        Verdict { name: name.into(), pass: false, witness: Some(witness.into()) }
    }

    pub fn from_check(name: &str, r: Result<(), String>) -> Self {
        match r {
            Ok(()) => Verdict::ok(name),
            Err(w) => Verdict::fail(name, w),
        }
    }
}

/// No two processes decide different values.
pub fn check_agreement(decisions: &[(ProcessId, Value)]) -> Result<(), String> {
    let mut first: Option<&(ProcessId, Value)> = None;
    for d in decisions {
        match first {
            None => first = Some(d),
            Some(f) if f.1 != d.1 => {
                return Err(format!("{} decided {:?} but {} decided {:?}", f.0, f.1, d.0, d.1));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Every decided value was proposed.
pub fn check_validity(decisions: &[(ProcessId, Value)], proposed: &BTreeSet<Value>) -> Result<(), String> {
    match decisions.iter().find(|(_, v)| !proposed.contains(v)) {
        Some((p, v)) => Err(format!("{p} decided {v:?} which nobody proposed")),
        None => Ok(()),
    }
}

/// Once a process observes `Decided(v)`, every later observation is `Decided(v)`.
/// In authentic runs the transient error symbol must never appear.
pub fn check_integrity(history: &[ConsensusResult], authentic: bool) -> Result<(), String> {
    let mut decided: Option<&Value> = None;
    for (i, r) in history.iter().enumerate() {
        match (decided, r) {
            (_, ConsensusResult::TransientError) if authentic => {
                return Err(format!("observation {i} is a transient error in an authentic run"));
            }
            (Some(d), ConsensusResult::Decided(v)) if d != v => {
                return Err(format!("decided {d:?} then {v:?}"));
            }
            (Some(d), other) if !matches!(other, ConsensusResult::Decided(_)) => {
                return Err(format!("decided {d:?} then observed {other:?}"));
            }
            (None, ConsensusResult::Decided(v)) => decided = Some(v),
            _ => {}
        }
    }
    Ok(())
}

/// All listed processes decided.
pub fn check_termination(results: &[(ProcessId, ConsensusResult)]) -> Result<(), String> {
    match results.iter().find(|(_, r)| r.decided().is_none()) {
        Some((p, r)) => Err(format!("{p} ended with {r:?}")),
        None => Ok(()),
    }
}

/// Whether the local object is consistent in the sense used for convergence.
pub fn def2_consistent(slot: &MvSlot) -> bool {
    let Some(o) = &slot.object else { return true };
    let n = slot.n;
    if !o.well_formed(n) || o.v.is_none() {
        return false;
    }
    let k = o.k();
    if k >= n as i64 - 1 {
        return false;
    }
    let next = (k + 1) as usize;
    match o.bc[next] {
        BcObject::Inactive => true,
        BcObject::Active { decided: None, .. } => true,
        BcObject::Active { decided: Some(true), .. } => o.proposals[next].is_some(),
        BcObject::Active { decided: Some(false), .. } => false,
    }
}

/// Slot placement and range: every active `CS[k]` has `seq mod M = k`,
/// `obsS <= max seq` and the active sequence numbers span at most 2.
pub fn def4_slots<S: Sink>(t: &ToUrbNode<S>) -> Result<(), String> {
    for (k, s) in t.cs.iter().enumerate() {
        if let Some(tag) = s.tag() {
            if tag % M as u64 != k as u64 {
                return Err(format!("{}: CS[{k}] holds seq {tag}", t.me));
            }
        }
    }
    let seqs = t.s_set();
    if let (Some(&lo), Some(&hi)) = (seqs.first(), seqs.last()) {
        if t.obs_s > hi || hi - lo > 1 {
            return Err(format!("{}: obsS={} with active seqs {:?}", t.me, t.obs_s, seqs));
        }
    }
    Ok(())
}

/// `obsS <= getSeq <= obsS + 1`.
pub fn def4_seq_window<S: Sink>(t: &ToUrbNode<S>) -> Result<(), String> {
    let g = t.get_seq();
    if t.obs_s <= g && g <= t.obs_s.saturating_add(1) {
        Ok(())
    } else {
        Err(format!("{}: obsS={} getSeq={}", t.me, t.obs_s, g))
    }
}

/// The query number dominates every in-flight `SYNC` it sent and every
/// `SYNCACK` addressed to it. `max_in_flight` is the largest such `sn`.
pub fn def4_sn(t_sn: u64, me: ProcessId, max_in_flight: Option<u64>) -> Result<(), String> {
    match max_in_flight {
        Some(m) if m > t_sn => Err(format!("{me}: sn={t_sn} but {m} in flight")),
        _ => Ok(()),
    }
}

/// Shared-`z` quiescence predicate over the correct processes.
pub fn check_pred<'a, S: Sink + 'a>(nodes: impl IntoIterator<Item = &'a ToUrbNode<S>>) -> bool {
    let mut z: Option<u64> = None;
    for t in nodes {
        let Some(agg) = &t.last else { return false };
        let g = t.get_seq();
        if !(g == agg.max_seq && g == t.obs_s && agg.all_seq.len() == 1 && agg.all_seq.contains(&g)) {
            return false;
        }
        match z {
            None => z = Some(g),
            Some(z) if z != g => return false,
            _ => {}
        }
    }
    true
}

fn fifo_and_unique(p: ProcessId, log: &[Delivered]) -> Result<(), String> {
    let mut last: HashMap<ProcessId, u64> = HashMap::new();
    let mut seen = HashSet::new();
    for d in log {
        if !seen.insert((d.origin, d.seq)) {
            return Err(format!("{p} delivered ({}, {}) twice", d.origin, d.seq));
        }
        if let Some(&prev) = last.get(&d.origin) {
            if d.seq <= prev {
                return Err(format!("{p} delivered {}#{} after #{prev}", d.origin, d.seq));
            }
        }
        last.insert(d.origin, d.seq);
    }
    Ok(())
}

/// Pairwise prefix comparability plus per-sender FIFO.
pub fn check_total_order(logs: &[(ProcessId, &[Delivered])]) -> Result<(), String> {
    for (p, log) in logs {
        fifo_and_unique(*p, log)?;
    }
    for (i, (p, a)) in logs.iter().enumerate() {
        for (q, b) in &logs[i + 1..] {
            let m = a.len().min(b.len());
            if let Some(at) = (0..m).find(|&x| a[x] != b[x]) {
                return Err(format!(
                    "{p} and {q} diverge at position {at}: {}#{} vs {}#{}",
                    a[at].origin, a[at].seq, b[at].origin, b[at].seq
                ));
            }
        }
    }
    Ok(())
}

/// Order agreement on logs that may start at different positions: every
/// pair of processes delivers their common messages in the same relative
/// order; logs are FIFO per sender and duplicate-free.
pub fn check_suffix_order(logs: &[(ProcessId, &[Delivered])]) -> Result<(), String> {
    for (p, log) in logs {
        fifo_and_unique(*p, log)?;
    }
    for (i, (p, a)) in logs.iter().enumerate() {
        let pos: BTreeMap<(ProcessId, u64), usize> =
            a.iter().enumerate().map(|(x, d)| ((d.origin, d.seq), x)).collect();
        for (q, b) in &logs[i + 1..] {
            let mut prev: Option<usize> = None;
            for d in b.iter() {
                if let Some(&x) = pos.get(&(d.origin, d.seq)) {
                    if prev.is_some_and(|pr| x < pr) {
                        return Err(format!("{p} and {q} order {}#{} differently", d.origin, d.seq));
                    }
                    prev = Some(x);
                }
            }
        }
    }
    Ok(())
}
