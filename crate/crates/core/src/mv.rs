//! Self-stabilizing multivalued consensus reduced to at most `n` binary
//! consensus objects.
//!
//! The object never blocks: [`MvSlot::result`] reports `Bot` until a decision
//! is available and `TransientError` when the local state cannot lead to one.

use serde::{Deserialize, Serialize};

use crate::bc::BcObject;
use crate::types::{ConsensusResult, ProcessId, Value};
use crate::urb::TxDescriptor;

/// How the binary objects are invoked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One object at a time, in index order.
    #[default]
    Sequential,
    /// All inactive objects in a single submission.
    Concurrent,
}

/// Services the object relies on. Implemented by the simulator per process.
pub trait MvEnv {
    fn urb_broadcast(&mut self, tag: u64, v: Value, forged: bool) -> TxDescriptor;
    fn has_terminated(&self, tx: &TxDescriptor) -> bool;
    /// Submit proposals for the given indices of object `tag` as one request.
    fn bin_propose(&mut self, tag: u64, entries: &[(usize, bool)]);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvObject {
    pub tag: u64,
    pub v: Option<Value>,
    pub proposals: Vec<Option<Value>>,
    pub bc: Vec<BcObject>,
    pub tx: Option<TxDescriptor>,
    pub one_term: bool,
    /// Harness-only provenance: the object descends from injected state.
    #[serde(skip)]
    pub forged: bool,
}

impl MvObject {
    pub fn fresh(tag: u64, n: usize, v: Value) -> Self {
        MvObject {
            tag,
            v: Some(v),
            proposals: vec![None; n],
            bc: vec![BcObject::Inactive; n],
            tx: None,
            one_term: false,
            forged: false,
        }
    }

    pub fn well_formed(&self, n: usize) -> bool {
        self.proposals.len() == n && self.bc.len() == n
    }

    /// Length of the prefix of objects decided `False`, minus one.
    pub fn k(&self) -> i64 {
        self.bc.iter().take_while(|b| b.result() == Some(false)).count() as i64 - 1
    }

    fn result_active(&self, n: usize) -> ConsensusResult {
        if !self.well_formed(n) {
            return ConsensusResult::TransientError;
        }
        let k = self.k();
        if self.v.is_none() || k >= n as i64 - 1 {
            return ConsensusResult::TransientError;
        }
        let next = (k + 1) as usize;
        if self.bc[next].result() != Some(true) {
            return ConsensusResult::Bot;
        }
        match &self.proposals[next] {
            None => ConsensusResult::TransientError,
            Some(x) => ConsensusResult::Decided(x.clone()),
        }
    }
}

/// Outcome of one do-forever step, for metrics and traces.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepEffects {
    pub broadcast: Option<TxDescriptor>,
    /// BC indices passed to `bin_propose` during this step.
    pub proposed: Vec<usize>,
    pub deactivated: bool,
}

/// The per-process object `O`, inactive when `object` is `None`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvSlot {
    pub n: usize,
    pub object: Option<MvObject>,
}

impl MvSlot {
    pub fn new(n: usize) -> Self {
        MvSlot { n, object: None }
    }

    pub fn is_active(&self) -> bool {
        self.object.is_some()
    }

    pub fn tag(&self) -> Option<u64> {
        self.object.as_ref().map(|o| o.tag)
    }

    pub fn propose(&mut self, tag: u64, v: Value) {
        if self.object.is_none() {
            self.object = Some(MvObject::fresh(tag, self.n, v));
        }
    }

    pub fn k(&self) -> Option<i64> {
        self.object.as_ref().map(MvObject::k)
    }

    pub fn result(&self) -> ConsensusResult {
        match &self.object {
            None => ConsensusResult::Bot,
            Some(o) => o.result_active(self.n),
        }
    }

    pub fn deactivate(&mut self) {
        self.object = None;
    }

    pub fn do_forever(&mut self, env: &mut impl MvEnv, variant: Variant) -> StepEffects {
        let mut fx = StepEffects::default();
        let n = self.n;
        let Some(o) = self.object.as_mut() else {
            return fx;
        };
        if !o.well_formed(n) {
            self.object = None;
            fx.deactivated = true;
            return fx;
        }
        if let Some(v) = o.v.clone() {
            let done = o.tx.as_ref().map(|t| env.has_terminated(t));
            if done != Some(false) {
                o.one_term |= done == Some(true);
                let tx = env.urb_broadcast(o.tag, v, o.forged);
                o.tx = Some(tx);
                fx.broadcast = Some(tx);
            }
        }
        if !o.one_term {
            return fx;
        }
        match variant {
            Variant::Sequential => {
                let k = o.k();
                if k < n as i64 - 1 {
                    let next = (k + 1) as usize;
                    let prev_done = k == -1 || o.bc[k as usize].result().is_some();
                    if o.bc[next].is_inactive() && prev_done {
                        let b = o.proposals[next].is_some();
                        o.bc[next] = BcObject::Active { my_proposal: b, decided: None };
                        env.bin_propose(o.tag, &[(next, b)]);
                        fx.proposed.push(next);
                    }
                }
            }
            Variant::Concurrent => {
                let entries: Vec<(usize, bool)> = (0..n)
                    .filter(|&k| o.bc[k].is_inactive())
                    .map(|k| (k, o.proposals[k].is_some()))
                    .collect();
                if !entries.is_empty() {
                    for &(k, b) in &entries {
                        o.bc[k] = BcObject::Active { my_proposal: b, decided: None };
                    }
                    env.bin_propose(o.tag, &entries);
                    fx.proposed = entries.iter().map(|e| e.0).collect();
                }
            }
        }
        fx
    }

    /// URB delivery of `PROPOSAL(v_j)` for object `tag` from `from`.
    pub fn on_proposal(&mut self, tag: u64, from: ProcessId, vj: Option<Value>, forged: bool) {
        let Some(vj) = vj else { return };
        let j = from.index();
        if j >= self.n {
            return;
        }
        match self.object.as_mut() {
            Some(o) => {
                if let Some(slot @ None) = o.proposals.get_mut(j) {
                    *slot = Some(vj);
                    o.forged |= forged;
                }
            }
            None => {
                let mut o = MvObject::fresh(tag, self.n, vj.clone());
                o.proposals[j] = Some(vj);
                o.forged = forged;
                self.object = Some(o);
            }
        }
    }

    /// A decision reported by the binary consensus service.
    pub fn on_bc_decide(&mut self, tag: u64, index: usize, value: bool) {
        if let Some(o) = self.object.as_mut() {
            if o.tag != tag {
                return;
            }
            if let Some(BcObject::Active { decided: d @ None, .. }) = o.bc.get_mut(index) {
                *d = Some(value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProcessId;

    #[derive(Default)]
    struct Rec {
        next: u64,
        terminated: bool,
        proposals: Vec<Vec<(usize, bool)>>,
    }

    impl MvEnv for Rec {
        fn urb_broadcast(&mut self, tag: u64, _v: Value, _forged: bool) -> TxDescriptor {
            self.next += 1;
            TxDescriptor { sender: ProcessId(0), seq: self.next, tag }
        }
        fn has_terminated(&self, _tx: &TxDescriptor) -> bool {
            self.terminated
        }
        fn bin_propose(&mut self, _tag: u64, entries: &[(usize, bool)]) {
            self.proposals.push(entries.to_vec());
        }
    }

    fn bc(d: Option<bool>) -> BcObject {
        BcObject::Active { my_proposal: d.unwrap_or(false), decided: d }
    }

    fn active(n: usize) -> MvSlot {
        let mut s = MvSlot::new(n);
        s.propose(0, Value::from_static("mine"));
        s
    }

    #[test]
    fn k_examples() {
        let mut s = active(4);
        assert_eq!(s.k(), Some(-1));
        let o = s.object.as_mut().unwrap();
        o.bc = vec![bc(Some(false)), bc(Some(false)), BcObject::Inactive, BcObject::Inactive];
        assert_eq!(s.k(), Some(1));
        let o = s.object.as_mut().unwrap();
        o.bc = vec![bc(Some(false)), bc(Some(true)), bc(Some(false)), BcObject::Inactive];
        assert_eq!(s.k(), Some(0));
        let o = s.object.as_mut().unwrap();
        o.bc = vec![bc(Some(false)); 4];
        assert_eq!(s.k(), Some(3));
    }

    #[test]
    fn result_cascade() {
        assert_eq!(MvSlot::new(4).result(), ConsensusResult::Bot);
        let mut s = active(4);
        assert_eq!(s.result(), ConsensusResult::Bot);
        s.object.as_mut().unwrap().bc = vec![bc(Some(false)); 4];
        assert_eq!(s.result(), ConsensusResult::TransientError);

        let mut s = active(4);
        let o = s.object.as_mut().unwrap();
        o.bc[0] = bc(Some(false));
        o.bc[1] = bc(Some(true));
        o.proposals[1] = Some(Value::from_static("b"));
        assert_eq!(s.result(), ConsensusResult::Decided(Value::from_static("b")));
        s.object.as_mut().unwrap().proposals[1] = None;
        assert_eq!(s.result(), ConsensusResult::TransientError);

        let mut s = active(4);
        s.object.as_mut().unwrap().v = None;
        assert_eq!(s.result(), ConsensusResult::TransientError);
    }

    #[test]
    fn propose_is_guarded() {
        let mut s = active(3);
        let before = s.clone();
        s.propose(0, Value::from_static("other"));
        assert_eq!(s, before);
        let o = s.object.unwrap();
        assert_eq!(o.v, Some(Value::from_static("mine")));
        assert!(!o.one_term && o.tx.is_none());
    }

    #[test]
    fn first_step_broadcasts_without_one_term() {
        let mut s = active(3);
        let mut env = Rec::default();
        let fx = s.do_forever(&mut env, Variant::Sequential);
        assert!(fx.broadcast.is_some());
        assert!(!s.object.as_ref().unwrap().one_term);
        // Not terminated yet: no rebroadcast.
        assert!(s.do_forever(&mut env, Variant::Sequential).broadcast.is_none());
        env.terminated = true;
        let fx = s.do_forever(&mut env, Variant::Sequential);
        assert!(fx.broadcast.is_some());
        assert!(s.object.as_ref().unwrap().one_term);
        assert_eq!(env.proposals, vec![vec![(0, false)]]);
    }

    #[test]
    fn sequential_waits_for_previous_decision() {
        let mut s = active(3);
        let o = s.object.as_mut().unwrap();
        o.one_term = true;
        o.tx = Some(TxDescriptor { sender: ProcessId(0), seq: 1, tag: 0 });
        o.proposals[0] = Some(Value::from_static("a"));
        let mut env = Rec::default();
        s.do_forever(&mut env, Variant::Sequential);
        s.do_forever(&mut env, Variant::Sequential);
        assert_eq!(env.proposals, vec![vec![(0, true)]]);
        s.on_bc_decide(0, 0, false);
        s.do_forever(&mut env, Variant::Sequential);
        assert_eq!(env.proposals.len(), 2);
        assert_eq!(env.proposals[1], vec![(1, false)]);
    }

    #[test]
    fn concurrent_submits_all_at_once() {
        let mut s = active(4);
        let o = s.object.as_mut().unwrap();
        o.one_term = true;
        o.tx = Some(TxDescriptor { sender: ProcessId(0), seq: 1, tag: 0 });
        o.proposals[2] = Some(Value::from_static("c"));
        let mut env = Rec::default();
        let fx = s.do_forever(&mut env, Variant::Concurrent);
        assert_eq!(fx.proposed, vec![0, 1, 2, 3]);
        assert_eq!(env.proposals, vec![vec![(0, false), (1, false), (2, true), (3, false)]]);
        s.do_forever(&mut env, Variant::Concurrent);
        assert_eq!(env.proposals.len(), 1);
    }

    #[test]
    fn proposal_handler() {
        let mut s = MvSlot::new(3);
        s.on_proposal(5, ProcessId(2), Some(Value::from_static("a")), false);
        let o = s.object.as_ref().unwrap();
        assert_eq!((o.tag, o.v.clone()), (5, Some(Value::from_static("a"))));
        assert_eq!(o.proposals[2], Some(Value::from_static("a")));
        assert!(!o.one_term);

        s.on_proposal(5, ProcessId(2), Some(Value::from_static("z")), false);
        assert_eq!(s.object.as_ref().unwrap().proposals[2], Some(Value::from_static("a")));
        s.on_proposal(5, ProcessId(1), Some(Value::from_static("c")), false);
        let o = s.object.as_ref().unwrap();
        assert_eq!(o.proposals[1], Some(Value::from_static("c")));
        assert_eq!(o.v, Some(Value::from_static("a")));

        let before = s.clone();
        s.on_proposal(5, ProcessId(0), None, false);
        assert_eq!(s, before);
    }

    #[test]
    fn malformed_object_is_deactivated() {
        let mut s = active(3);
        s.object.as_mut().unwrap().bc.pop();
        assert_eq!(s.result(), ConsensusResult::TransientError);
        let fx = s.do_forever(&mut Rec::default(), Variant::Sequential);
        assert!(fx.deactivated && !s.is_active());
    }

    #[test]
    fn late_decisions_for_other_tags_are_ignored() {
        let mut s = active(3);
        s.object.as_mut().unwrap().bc[0] = bc(None);
        s.on_bc_decide(9, 0, true);
        assert_eq!(s.object.as_ref().unwrap().bc[0].result(), None);
        s.on_bc_decide(0, 0, true);
        assert_eq!(s.object.as_ref().unwrap().bc[0].result(), Some(true));
        // Integrity: a later report cannot flip it.
        s.on_bc_decide(0, 0, false);
        assert_eq!(s.object.as_ref().unwrap().bc[0].result(), Some(true));
    }
}
